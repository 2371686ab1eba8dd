//! Chat backends: an OpenAI-compatible HTTP client, the scene-graph
//! simulator and a replay stub, all behind [`ChatBackend`].

mod cache;
mod http;
mod replay;
mod simulated;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{backoff_delay, HttpBackend};
pub use replay::ReplayBackend;
pub use simulated::SimulatorBackend;

use crate::simulator::HallucinationProfile;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("auth token environment variable `{0}` is not set")]
    AuthMissing(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay exhausted: no recorded response left for prompt {0:?}")]
    ReplayExhausted(String),
    #[error("simulator: {0}")]
    Simulator(#[from] crate::simulator::SimulatorError),
    #[error("cache: {0}")]
    Cache(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub media_type: String,
    pub data: Vec<u8>,
}

impl ImageAttachment {
    pub fn sha256_hex(&self) -> String {
        hex::encode(Sha256::digest(&self.data))
    }

    pub fn data_url(&self) -> String {
        use base64::Engine;
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.data)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageAttachment>,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: MessageRole::User, text: text.into(), image: None }
    }

    pub fn user_with_image(text: impl Into<String>, image: Option<ImageAttachment>) -> Self {
        Self { role: MessageRole::User, text: text.into(), image }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self { role: MessageRole::System, text: text.into(), image: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub n_samples: u32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SamplingParams {
    /// Single greedy answer.
    pub fn greedy(seed: Option<u64>) -> Self {
        Self { temperature: 0.0, n_samples: 1, max_tokens: 512, seed }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::greedy(None)
    }
}

/// What a backend returned for one chat call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChatReply {
    pub texts: Vec<String>,
    pub retries: u32,
    pub cached: bool,
    pub elapsed: Option<Duration>,
}

impl ChatReply {
    pub fn new(texts: Vec<String>) -> Self {
        Self { texts, ..Default::default() }
    }

    /// The first text, or an empty string if the reply carried none.
    pub fn first(&self) -> &str {
        self.texts.first().map(String::as_str).unwrap_or("")
    }
}

pub trait ChatBackend: Send + Sync {
    /// Short label recorded in transcripts.
    fn id(&self) -> String;

    fn chat(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<ChatReply, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn id(&self) -> String {
        (**self).id()
    }

    fn chat(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<ChatReply, BackendError> {
        (**self).chat(messages, params)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn chat(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<ChatReply, BackendError> {
        (**self).chat(messages, params)
    }
}

/// Checks shared by every backend.
pub fn validate_request(messages: &[ChatMessage], params: &SamplingParams) -> Result<(), BackendError> {
    let last = messages
        .last()
        .ok_or_else(|| BackendError::InvalidRequest("no messages".into()))?;
    if last.role != MessageRole::User {
        return Err(BackendError::InvalidRequest("last message must come from the user".into()));
    }
    if messages.iter().any(|m| m.image.is_some() && m.role != MessageRole::User) {
        return Err(BackendError::InvalidRequest("images are only allowed on user messages".into()));
    }
    if params.n_samples == 0 || params.max_tokens == 0 {
        return Err(BackendError::InvalidRequest("n_samples and max_tokens must be positive".into()));
    }
    if params.temperature.is_nan() || params.temperature < 0.0 {
        return Err(BackendError::InvalidRequest("temperature must be non-negative".into()));
    }
    Ok(())
}

/// Text of the last user message.
pub fn last_user_text(messages: &[ChatMessage]) -> &str {
    messages
        .iter()
        .rev()
        .find(|m| m.role == MessageRole::User)
        .map(|m| m.text.as_str())
        .unwrap_or("")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Simulator,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub auth_token_env_var: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub max_in_flight: usize,
    pub supports_n: bool,
    pub send_seed: bool,
    pub cache_dir: Option<PathBuf>,
    pub cache_nondeterministic: bool,
    /// Scene-graph fixture for the simulator.
    pub scene_path: Option<PathBuf>,
    pub profile: HallucinationProfile,
    /// Transcript to replay.
    pub transcript_path: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Simulator,
            endpoint_url: None,
            model_name: "simulator".into(),
            auth_token_env_var: None,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_cap_ms: 8_000,
            max_in_flight: 4,
            supports_n: true,
            send_seed: true,
            cache_dir: None,
            cache_nondeterministic: false,
            scene_path: None,
            profile: HallucinationProfile::default(),
            transcript_path: None,
        }
    }
}

impl BackendConfig {
    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            model_name: model_name.into(),
            ..Default::default()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let missing = |what: &str| Err(BackendError::Config(format!("{:?} backend requires {what}", self.kind)));
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_none() => return missing("endpoint_url"),
            BackendKind::Simulator if self.scene_path.is_none() => return missing("scene_path"),
            BackendKind::Replay if self.transcript_path.is_none() => return missing("transcript_path"),
            _ => {}
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(BackendError::Config("model_name must be non-empty".into()));
        }
        self.profile.validate().map_err(|e| BackendError::Config(e.to_string()))
    }
}

#[derive(Serialize)]
struct CanonicalMessage<'a> {
    role: MessageRole,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_media_type: Option<&'a str>,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    model: &'a str,
    messages: Vec<CanonicalMessage<'a>>,
    temperature: f64,
    n: u32,
    max_tokens: u32,
    seed: Option<u64>,
}

/// Deterministic JSON form of a request, with image bytes replaced by their digest.
pub fn canonical_request(model_name: &str, messages: &[ChatMessage], params: &SamplingParams) -> serde_json::Value {
    let req = CanonicalRequest {
        model: model_name,
        messages: messages
            .iter()
            .map(|m| CanonicalMessage {
                role: m.role,
                text: &m.text,
                image_sha256: m.image.as_ref().map(ImageAttachment::sha256_hex),
                image_media_type: m.image.as_ref().map(|i| i.media_type.as_str()),
            })
            .collect(),
        temperature: params.temperature,
        n: params.n_samples,
        max_tokens: params.max_tokens,
        seed: params.seed,
    };
    serde_json::to_value(req).expect("canonical request serializes")
}

/// SHA-256 over the canonical request.
pub fn cache_key(config: &BackendConfig, messages: &[ChatMessage], params: &SamplingParams) -> [u8; 32] {
    let canonical = canonical_request(&config.model_name, messages, params);
    Sha256::digest(canonical.to_string().as_bytes()).into()
}

/// Caching is skipped for sampled requests without a seed, unless forced.
pub fn is_cacheable(config: &BackendConfig, params: &SamplingParams) -> bool {
    params.temperature == 0.0 || params.seed.is_some() || config.cache_nondeterministic
}

/// Build the backend a config describes.
pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn ChatBackend>, BackendError> {
    build_backend_for(config, crate::storage::Role::Lvlm, None)
}

/// Build a backend for one role. A simulator scene file with several scenes
/// needs `image_id` to pick one; a replayed transcript serves `role`'s calls.
pub fn build_backend_for(
    config: &BackendConfig,
    role: crate::storage::Role,
    image_id: Option<&str>,
) -> Result<Box<dyn ChatBackend>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Box::new(HttpBackend::new(config.clone())?),
        BackendKind::Simulator => {
            let path = config.scene_path.as_deref().expect("validated");
            let scenes = crate::simulator::load_scenes(path)?;
            let scene = match image_id {
                Some(id) => scenes.into_iter().find(|s| s.image_id == id).ok_or_else(|| {
                    BackendError::Config(format!("{} has no scene `{id}`", path.display()))
                })?,
                None if scenes.len() == 1 => scenes.into_iter().next().expect("one scene"),
                None => {
                    return Err(BackendError::Config(format!(
                        "{} holds {} scenes; pick one with an image id",
                        path.display(),
                        scenes.len()
                    )))
                }
            };
            Box::new(SimulatorBackend::new(scene, config.profile.clone()))
        }
        BackendKind::Replay => {
            let path = config.transcript_path.as_deref().expect("validated");
            Box::new(ReplayBackend::from_file(path, role)?)
        }
    })
}
