use super::{last_user_text, validate_request, BackendError, ChatBackend, ChatMessage, ChatReply, SamplingParams};
use crate::simulator::{answer, HallucinationProfile, SceneGraph};

/// The scene-graph simulator exposed as a chat backend.
#[derive(Debug, Clone)]
pub struct SimulatorBackend {
    scene: SceneGraph,
    profile: HallucinationProfile,
}

impl SimulatorBackend {
    pub fn new(scene: SceneGraph, profile: HallucinationProfile) -> Self {
        Self { scene, profile }
    }

    pub fn scene(&self) -> &SceneGraph {
        &self.scene
    }

    pub fn profile(&self) -> &HallucinationProfile {
        &self.profile
    }
}

impl ChatBackend for SimulatorBackend {
    fn id(&self) -> String {
        format!("sim:{}", self.scene.image_id)
    }

    /// Sample `k` uses seed `seed + k`, so samples differ but stay reproducible.
    fn chat(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<ChatReply, BackendError> {
        validate_request(messages, params)?;
        let question = last_user_text(messages);
        let texts = (0..params.n_samples)
            .map(|k| {
                let mut p = *params;
                p.seed = Some(params.seed.unwrap_or(0).wrapping_add(u64::from(k)));
                answer(&self.scene, &self.profile, question, &p)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ChatReply::new(texts))
    }
}
