//! Object extraction, attribute gathering, loop inquiries, scoring and
//! response mitigation for one instruction/image pair.

mod helper;
mod transcript;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use helper::{parse_object_list, split_sentences, Helper, ModelHelper, RuleHelper};
pub use transcript::{read_transcript_dir, write_transcript_dir, CallLog, PipelineTranscript};

use crate::backends::{BackendError, ChatBackend, ChatMessage, ImageAttachment, SamplingParams};
use crate::eval::{parse_binary_answer, BinaryAnswer, Label};
use crate::lexicon::{mentions, normalize_name};
use crate::prompts::{PromptError, PromptRegistry, TemplateId};
use crate::score::{classify, ExamineeObject, LoopOutcome, ObjectScore, Threshold, Verdict};
use crate::simulator::parse_existence_question;
use crate::storage::{QuestionKind, RunResult, Stage, TranscriptEvent, TranscriptHeader};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend call failed: {0}")]
    Backend(#[from] BackendError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("helper failed: {0}")]
    HelperFailure(String),
    #[error("refined response still mentions flagged objects: {0:?}")]
    MitigationLeak(Vec<String>),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

/// A failed run, with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("run {} failed: {source}", transcript.header.run_id)]
pub struct RunError {
    pub transcript: Box<PipelineTranscript>,
    #[source]
    pub source: PipelineError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStyle {
    /// "Could you tell me all the objects that ...": every possessor counts.
    #[default]
    FullCoverage,
    /// "What is/has ...": only the most obvious possessor is named.
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HelperMode {
    #[default]
    Model,
    RuleBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub lambda_threshold: Threshold,
    pub min_attributes: usize,
    pub max_describe_rounds: usize,
    pub question_style: QuestionStyle,
    pub describe_sampling: SamplingParams,
    pub helper_mode: HelperMode,
    pub per_object_concurrency: usize,
    pub seed: Option<u64>,
    /// Reuse an object's loop checks for later questions about the same image.
    pub memoize_verdicts: bool,
    /// Check backends answer before the first run.
    pub preflight: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lambda_threshold: Threshold::default(),
            min_attributes: 5,
            max_describe_rounds: 3,
            question_style: QuestionStyle::FullCoverage,
            describe_sampling: SamplingParams { temperature: 1.0, n_samples: 1, max_tokens: 512, seed: None },
            helper_mode: HelperMode::Model,
            per_object_concurrency: 4,
            seed: Some(0),
            memoize_verdicts: false,
            preflight: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.min_attributes == 0 {
            return bad("min_attributes must be at least 1");
        }
        if self.max_describe_rounds == 0 {
            return bad("max_describe_rounds must be at least 1");
        }
        if self.per_object_concurrency == 0 {
            return bad("per_object_concurrency must be at least 1");
        }
        if self.describe_sampling.n_samples == 0 {
            return bad("describe_sampling.n_samples must be at least 1");
        }
        if self.describe_sampling.temperature.is_nan() || self.describe_sampling.temperature < 0.0 {
            return bad("describe_sampling.temperature must be non-negative");
        }
        Ok(())
    }
}

/// One instruction to answer and check.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInput {
    pub instruction: String,
    pub image_id: Option<String>,
    pub image: Option<ImageAttachment>,
    /// Detected from the instruction when `None`.
    pub kind: Option<QuestionKind>,
}

impl RunInput {
    pub fn new(instruction: impl Into<String>) -> Self {
        Self { instruction: instruction.into(), image_id: None, image: None, kind: None }
    }

    pub fn with_image_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = Some(id.into());
        self
    }

    pub fn with_image(mut self, image: ImageAttachment) -> Self {
        self.image = Some(image);
        self
    }

    pub fn question_kind(&self) -> QuestionKind {
        self.kind.unwrap_or_else(|| {
            if parse_existence_question(&self.instruction).is_some() {
                QuestionKind::Binary
            } else {
                QuestionKind::OpenEnded
            }
        })
    }
}

/// "The object is made of wood in the image" -> "is made of wood".
pub fn attribute_predicate(statement: &str) -> String {
    let mut s = statement.trim().trim_end_matches(['.', '!', '?']).trim().to_string();
    for prefix in ["the object ", "this object ", "it "] {
        if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
            s = s[prefix.len()..].to_string();
            break;
        }
    }
    for suffix in [" in the image", " in this image", " in the picture"] {
        if let Some(rest) = s.strip_suffix(suffix) {
            s = rest.to_string();
            break;
        }
    }
    s
}

fn plural_verb(predicate: &str) -> String {
    let (first, rest) = predicate.split_once(' ').unwrap_or((predicate, ""));
    let verb = match first.to_lowercase().as_str() {
        "is" => "are",
        "has" => "have",
        "was" => "were",
        "does" => "do",
        _ => first,
    };
    if rest.is_empty() {
        verb.to_string()
    } else {
        format!("{verb} {rest}")
    }
}

/// Turn attribute statements into loop questions. Deterministic; no model call.
pub fn formulate_questions(
    prompts: &PromptRegistry,
    attributes: &[String],
    style: QuestionStyle,
) -> Result<Vec<String>, PromptError> {
    attributes
        .iter()
        .map(|a| {
            let pred = attribute_predicate(a);
            match style {
                QuestionStyle::FullCoverage => {
                    prompts.render(TemplateId::QuestionFormulationFull, &[("attribute", &plural_verb(&pred))])
                }
                QuestionStyle::Simple => {
                    prompts.render(TemplateId::QuestionFormulationSimple, &[("attribute", &pred)])
                }
            }
        })
        .collect()
}

/// Verdict for every object under `threshold`; missing attributes score 0.0.
pub fn detect(objects: &mut [ExamineeObject], threshold: Threshold) {
    for o in objects.iter_mut() {
        let score = o.score();
        if score == ObjectScore::NoAttributes && !o.warnings.iter().any(|w| w.contains("no attributes")) {
            o.warnings.push("no attributes extracted; scored 0.0".into());
        }
        o.verdict = Some(classify(score, threshold));
    }
}

pub fn flagged_objects(objects: &[ExamineeObject]) -> Vec<String> {
    objects
        .iter()
        .filter(|o| o.verdict.as_ref().is_some_and(Verdict::is_hallucinated))
        .map(|o| o.name.clone())
        .collect()
}

/// The final yes/no of a binary run re-scored at `threshold`: the initial
/// answer, flipped to "no" when the queried object scores below it.
pub fn binary_decision(transcript: &PipelineTranscript, threshold: Threshold) -> BinaryAnswer {
    let Some(result) = &transcript.result else {
        return BinaryAnswer::Unparseable;
    };
    let initial = parse_binary_answer(&result.original_response);
    if result.short_circuited || initial != BinaryAnswer::Yes {
        return initial;
    }
    let Some(q) = &result.queried_object else {
        return initial;
    };
    match transcript.object(q) {
        Some(o) if classify(o.score(), threshold).is_hallucinated() => BinaryAnswer::No,
        _ => initial,
    }
}

/// The final answer of a binary run as it was produced.
pub fn final_label(transcript: &PipelineTranscript) -> Option<Label> {
    transcript.result.as_ref().and_then(|r| parse_binary_answer(&r.revised_response).label())
}

fn statement_key(statement: &str) -> String {
    attribute_predicate(statement).to_lowercase()
}

type MemoKey = (String, String);

/// Events and outcome of examining one object.
type Examined = (Vec<TranscriptEvent>, Result<ExamineeObject, PipelineError>);

pub struct Pipeline {
    cfg: PipelineConfig,
    lvlm: Arc<dyn ChatBackend>,
    helper: Arc<dyn Helper>,
    prompts: PromptRegistry,
    memo: Mutex<HashMap<MemoKey, ExamineeObject>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, lvlm: Arc<dyn ChatBackend>, helper: Arc<dyn Helper>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self { cfg, lvlm, helper, prompts: PromptRegistry::builtin(), memo: Mutex::new(HashMap::new()) })
    }

    pub fn with_prompts(mut self, prompts: PromptRegistry) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn prompts(&self) -> &PromptRegistry {
        &self.prompts
    }

    /// A minimal call to each backend; model helpers are only reached through runs.
    pub fn preflight(&self) -> Result<(), PipelineError> {
        let msg = [ChatMessage::user("Reply with the single word OK.")];
        self.lvlm.chat(&msg, &SamplingParams::greedy(self.cfg.seed))?;
        Ok(())
    }

    fn greedy(&self) -> SamplingParams {
        SamplingParams::greedy(self.cfg.seed)
    }

    fn ask_lvlm(&self, stage: Stage, prompt: String, image: Option<&ImageAttachment>, params: &SamplingParams, log: &mut CallLog) -> Result<Vec<String>, PipelineError> {
        let msg = [ChatMessage::user_with_image(prompt, image.cloned())];
        Ok(log.call(&*self.lvlm, stage, &msg, params)?.texts)
    }

    pub fn extract_objects(&self, response: &str, log: &mut CallLog) -> Result<Vec<String>, PipelineError> {
        let objs = self.helper.extract_objects(response, log)?;
        let mut out: Vec<String> = Vec::new();
        for o in objs {
            let n = normalize_name(&o);
            if !n.is_empty() && !out.contains(&n) {
                out.push(n);
            }
        }
        Ok(out)
    }

    /// Attribute statements from one description; any statement that still
    /// names the object is dropped with a warning.
    pub fn extract_attributes(&self, description: &str, object: &str, log: &mut CallLog) -> Result<(Vec<String>, Vec<String>), PipelineError> {
        let mut kept = Vec::new();
        let mut warnings = Vec::new();
        for s in self.helper.extract_attributes(description, object, log)? {
            let s = s.trim().to_string();
            if s.is_empty() {
                continue;
            }
            if mentions(&s, object) {
                warnings.push(format!("dropped attribute naming the object: {s:?}"));
            } else {
                kept.push(s);
            }
        }
        Ok((kept, warnings))
    }

    /// Describe rounds until `min_attributes` distinct statements or the round cap.
    pub fn gather_attributes(&self, obj: &mut ExamineeObject, image: Option<&ImageAttachment>, log: &mut CallLog) -> Result<(), PipelineError> {
        let prompt = self.prompts.render(TemplateId::DescribeObject, &[("object", &obj.name)])?;
        let mut keys: Vec<String> = obj.attributes.iter().map(|a| statement_key(a)).collect();
        for round in 0..self.cfg.max_describe_rounds {
            let mut params = self.cfg.describe_sampling;
            params.seed = self.cfg.seed.map(|s| s.wrapping_add(1 + round as u64 * u64::from(params.n_samples)));
            let texts = self.ask_lvlm(Stage::Describe, prompt.clone(), image, &params, log)?;
            for d in texts {
                let (attrs, warns) = self.extract_attributes(&d, &obj.name, log)?;
                obj.warnings.extend(warns);
                for a in attrs {
                    let k = statement_key(&a);
                    if !keys.contains(&k) {
                        keys.push(k);
                        obj.attributes.push(a);
                    }
                }
                obj.descriptions.push(d);
            }
            if obj.attributes.len() >= self.cfg.min_attributes {
                break;
            }
        }
        Ok(())
    }

    pub fn inquire_objects(&self, questions: &[String], image: Option<&ImageAttachment>, log: &mut CallLog) -> Result<Vec<String>, PipelineError> {
        let params = self.greedy();
        questions
            .iter()
            .map(|q| {
                let texts = self.ask_lvlm(Stage::Inquire, q.clone(), image, &params, log)?;
                Ok(texts.into_iter().next().unwrap_or_default())
            })
            .collect()
    }

    /// Closed iff the answer names the object. One retry on an unusable
    /// judgment, then open with a warning.
    pub fn check_loop(&self, answer: &str, object: &str, log: &mut CallLog) -> Result<(LoopOutcome, Option<String>), PipelineError> {
        if answer.trim().is_empty() {
            return Ok((LoopOutcome::Open, Some("empty inquiry answer; loop open".into())));
        }
        for _ in 0..2 {
            if let Some(closed) = self.helper.judge_loop(answer, object, log)? {
                return Ok((LoopOutcome::from_closed(closed), None));
            }
        }
        Ok((LoopOutcome::Open, Some(format!("unusable loop judgment for answer {answer:?}; loop open"))))
    }

    /// Gather, question and check one object.
    pub fn examine(&self, name: &str, image: Option<&ImageAttachment>, log: &mut CallLog) -> Result<ExamineeObject, PipelineError> {
        let mut obj = ExamineeObject::new(name);
        self.gather_attributes(&mut obj, image, log)?;
        obj.questions = formulate_questions(&self.prompts, &obj.attributes, self.cfg.question_style)?;
        obj.answers = self.inquire_objects(&obj.questions, image, log)?;
        for a in obj.answers.clone() {
            let (outcome, warning) = self.check_loop(&a, &obj.name, log)?;
            obj.outcomes.push(outcome);
            obj.warnings.extend(warning);
        }
        Ok(obj)
    }

    /// Rewrite the response without the flagged objects.
    pub fn mitigate(
        &self,
        original: &str,
        kind: QuestionKind,
        queried: Option<&str>,
        flagged: &[String],
        log: &mut CallLog,
    ) -> Result<String, PipelineError> {
        if flagged.is_empty() {
            return Ok(original.to_string());
        }
        if kind == QuestionKind::Binary {
            return Ok(match queried {
                Some(q) if flagged.iter().any(|f| f == q) => format!("No, there is no {q} in the image."),
                _ => original.to_string(),
            });
        }
        let leaks = |text: &str| flagged.iter().filter(|f| mentions(text, f)).cloned().collect::<Vec<_>>();
        let first = self.helper.rewrite(original, flagged, log)?;
        if leaks(&first).is_empty() {
            return Ok(first);
        }
        let second = self.helper.rewrite(&first, flagged, log)?;
        let left = leaks(&second);
        if left.is_empty() {
            Ok(second)
        } else {
            Err(PipelineError::MitigationLeak(left))
        }
    }

    fn run_id(&self, input: &RunInput) -> String {
        let mut h = Sha256::new();
        h.update(input.instruction.as_bytes());
        h.update([0]);
        h.update(input.image_id.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
        if let Some(img) = &input.image {
            h.update(img.sha256_hex().as_bytes());
        }
        // Execution knobs that cannot change results stay out of the id.
        let identity = PipelineConfig { per_object_concurrency: 1, preflight: false, ..self.cfg.clone() };
        h.update(serde_json::to_vec(&identity).expect("config serializes"));
        h.update(self.lvlm.id().as_bytes());
        h.update(self.helper.id().as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    fn examine_all(&self, names: &[String], input: &RunInput, run_id: &str) -> Vec<Examined> {
        let slots: Vec<Mutex<Option<Examined>>> = names.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let work = || loop {
            if failed.load(Ordering::SeqCst) {
                break;
            }
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(name) = names.get(i) else { break };
            let key = input.image_id.clone().map(|id| (id, name.clone()));
            let cached = match (&key, self.cfg.memoize_verdicts) {
                (Some(k), true) => self.memo.lock().expect("memo lock").get(k).cloned(),
                _ => None,
            };
            let mut log = CallLog::new(run_id, Some(name));
            let res = match cached {
                Some(o) => Ok(o),
                None => self.examine(name, input.image.as_ref(), &mut log),
            };
            match (&res, key) {
                (Ok(o), Some(k)) if self.cfg.memoize_verdicts => {
                    self.memo.lock().expect("memo lock").insert(k, o.clone());
                }
                (Err(_), _) => failed.store(true, Ordering::SeqCst),
                _ => {}
            }
            *slots[i].lock().expect("slot lock") = Some((log.into_events(), res));
        };
        let workers = self.cfg.per_object_concurrency.min(names.len()).max(1);
        if workers == 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(work);
                }
            });
        }
        // Objects skipped after a failure leave their slot empty.
        slots.into_iter().filter_map(|slot| slot.into_inner().expect("slot lock")).collect()
    }

    /// Answer, check every mentioned object and revise. On failure the error
    /// carries the partial transcript.
    pub fn run(&self, input: &RunInput) -> Result<PipelineTranscript, RunError> {
        let run_id = self.run_id(input);
        let kind = input.question_kind();
        let mut transcript = PipelineTranscript {
            header: TranscriptHeader {
                run_id: run_id.clone(),
                instruction: input.instruction.clone(),
                image_id: input.image_id.clone(),
                question_kind: kind,
                threshold: self.cfg.lambda_threshold,
                lvlm: self.lvlm.id(),
                helper: self.helper.id(),
            },
            events: Vec::new(),
            objects: Vec::new(),
            result: None,
        };
        let mut events: Vec<TranscriptEvent> = Vec::new();
        let fail = |mut t: PipelineTranscript, events: Vec<TranscriptEvent>, source: PipelineError| {
            t.events = sequence(events);
            RunError { transcript: Box::new(t), source }
        };

        let mut log = CallLog::new(&run_id, None);
        let original = match self.ask_lvlm(Stage::InitialResponse, input.instruction.clone(), input.image.as_ref(), &self.greedy(), &mut log) {
            Ok(t) => t.into_iter().next().unwrap_or_default(),
            Err(e) => return Err(fail(transcript, log.into_events(), e)),
        };

        let queried = match kind {
            QuestionKind::Binary => parse_existence_question(&input.instruction),
            QuestionKind::OpenEnded => None,
        };
        let short_circuited = kind == QuestionKind::Binary && parse_binary_answer(&original) != BinaryAnswer::Yes;
        let names = if short_circuited {
            Vec::new()
        } else if let Some(q) = &queried {
            vec![q.clone()]
        } else {
            match self.extract_objects(&original, &mut log) {
                Ok(n) => n,
                Err(e) => return Err(fail(transcript, log.into_events(), e)),
            }
        };
        events.extend(log.into_events());

        let mut first_error = None;
        for (evs, res) in self.examine_all(&names, input, &run_id) {
            events.extend(evs);
            match res {
                Ok(o) => transcript.objects.push(o),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(fail(transcript, events, e));
        }

        detect(&mut transcript.objects, self.cfg.lambda_threshold);
        let flagged = flagged_objects(&transcript.objects);
        let mut log = CallLog::new(&run_id, None);
        let revised = self.mitigate(&original, kind, queried.as_deref(), &flagged, &mut log);
        events.extend(log.into_events());
        let revised = match revised {
            Ok(r) => r,
            Err(e) => return Err(fail(transcript, events, e)),
        };
        transcript.events = sequence(events);
        transcript.result = Some(RunResult {
            original_response: original,
            revised_response: revised,
            queried_object: queried,
            short_circuited,
            flagged,
        });
        Ok(transcript)
    }
}

fn sequence(mut events: Vec<TranscriptEvent>) -> Vec<TranscriptEvent> {
    for (i, e) in events.iter_mut().enumerate() {
        e.seq = i as u64;
    }
    events
}

/// Build the helper a config asks for. Model mode talks to `helper_backend`.
pub fn build_helper(mode: HelperMode, helper_backend: Option<Arc<dyn ChatBackend>>, seed: Option<u64>) -> Result<Arc<dyn Helper>, PipelineError> {
    match mode {
        HelperMode::RuleBased => Ok(Arc::new(RuleHelper::standard())),
        HelperMode::Model => {
            let backend = helper_backend.ok_or_else(|| PipelineError::Config("model helper mode needs a helper backend".into()))?;
            Ok(Arc::new(ModelHelper::new(backend, PromptRegistry::builtin(), seed)))
        }
    }
}
