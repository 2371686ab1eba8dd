//! Object-hallucination detection for vision-language models by asking about
//! an object's attributes and checking whether the answers lead back to it.

pub mod backends;
pub mod config;
pub mod data;
pub mod eval;
pub mod lexicon;
pub mod pipeline;
pub mod prompts;
pub mod score;
pub mod simulator;
pub mod storage;

pub use backends::{BackendConfig, BackendError, BackendKind, ChatBackend, ChatMessage, ChatReply, SamplingParams};
pub use config::{ConfigError, Overrides, RunConfig};
pub use eval::{EvalError, EvalRecord, Label, MetricsReport, Setting};
pub use pipeline::{Pipeline, PipelineConfig, PipelineError, PipelineTranscript, QuestionStyle, RunError, RunInput};
pub use prompts::{PromptError, PromptRegistry, TemplateId};
pub use score::{classify, loop_rate, ExamineeObject, LoopOutcome, LoopRateScore, ObjectScore, Threshold, Verdict, VerdictKind};
pub use simulator::{HallucinationProfile, SceneGraph, SceneObject, SimulatorError};
pub use storage::{StorageError, TranscriptLine};
