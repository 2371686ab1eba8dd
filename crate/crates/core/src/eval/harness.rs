use std::collections::HashMap;
use std::sync::Arc;

use super::{parse_binary_answer_with, EvalRecord, Label};
use crate::backends::{ChatBackend, ImageAttachment, SimulatorBackend};
use crate::pipeline::{Helper, Pipeline, PipelineConfig, PipelineError, PipelineTranscript, RunError, RunInput};
use crate::simulator::{HallucinationProfile, SceneGraph, SimulatorError};

/// Run the pipeline once per record. `lvlm_for` is asked once per image id for
/// the backend and, optionally, the image bytes. Pipelines (and so verdict
/// memos) are shared between records of the same image.
pub fn run_records<F>(
    records: &[EvalRecord],
    cfg: &PipelineConfig,
    helper: Arc<dyn Helper>,
    mut lvlm_for: F,
) -> Result<Vec<Result<PipelineTranscript, RunError>>, PipelineError>
where
    F: FnMut(&str) -> Result<(Arc<dyn ChatBackend>, Option<ImageAttachment>), PipelineError>,
{
    let mut pipelines: HashMap<String, (Pipeline, Option<ImageAttachment>)> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !pipelines.contains_key(&r.image_id) {
            let (lvlm, image) = lvlm_for(&r.image_id)?;
            pipelines.insert(r.image_id.clone(), (Pipeline::new(cfg.clone(), lvlm, helper.clone())?, image));
        }
        let (pipeline, image) = &pipelines[&r.image_id];
        let mut input = RunInput::new(&r.question).with_image_id(&r.image_id);
        if let Some(img) = image {
            input = input.with_image(img.clone());
        }
        out.push(pipeline.run(&input));
    }
    Ok(out)
}

/// [`run_records`] against simulated scenes.
pub fn run_simulated(
    records: &[EvalRecord],
    scenes: &[SceneGraph],
    profile: &HallucinationProfile,
    cfg: &PipelineConfig,
    helper: Arc<dyn Helper>,
) -> Result<Vec<Result<PipelineTranscript, RunError>>, PipelineError> {
    let by_id: HashMap<&str, &SceneGraph> = scenes.iter().map(|s| (s.image_id.as_str(), s)).collect();
    run_records(records, cfg, helper, |id| {
        let scene = by_id
            .get(id)
            .ok_or_else(|| PipelineError::Config(format!("no scene for image `{id}`")))?;
        profile.validate_for(scene).map_err(|e: SimulatorError| PipelineError::Config(e.to_string()))?;
        Ok((Arc::new(SimulatorBackend::new((*scene).clone(), profile.clone())) as Arc<dyn ChatBackend>, None))
    })
}

/// Labels before and after mitigation for records matched to transcripts.
/// Answers with no yes/no cue go to `judge` when given, else count as wrong.
pub fn predictions(
    matched: &[&PipelineTranscript],
    records: &[EvalRecord],
    judge: Option<&dyn ChatBackend>,
) -> (Vec<Label>, Vec<Label>) {
    matched
        .iter()
        .zip(records)
        .map(|(t, r)| {
            let (orig, revised) = match &t.result {
                Some(res) => (res.original_response.as_str(), res.revised_response.as_str()),
                None => ("", ""),
            };
            (
                parse_binary_answer_with(orig, judge).resolve(r.label),
                parse_binary_answer_with(revised, judge).resolve(r.label),
            )
        })
        .unzip()
}
