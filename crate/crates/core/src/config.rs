//! Run configuration: defaults, then a JSON file, then command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendConfig, BackendKind};
use crate::pipeline::{HelperMode, PipelineConfig, QuestionStyle};
use crate::score::{ScoreError, Threshold};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    /// The vision-language model under test.
    pub lvlm: BackendConfig,
    /// Text model for the helper; required in model helper mode.
    pub helper: Option<BackendConfig>,
    /// Ask the helper backend to read answers with no yes/no cue.
    pub judge_unparseable: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig { helper_mode: HelperMode::RuleBased, ..Default::default() },
            lvlm: BackendConfig::default(),
            helper: None,
            judge_unparseable: false,
        }
    }
}

/// Values given on the command line; each one wins over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub min_attributes: Option<usize>,
    pub question_style: Option<QuestionStyle>,
    pub seed: Option<u64>,
    pub backend_kind: Option<BackendKind>,
    pub helper_mode: Option<HelperMode>,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        Self::from_json(&text, &p)
    }

    /// Defaults, overlaid by `path` when given, overlaid by `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(l) = o.lambda {
            self.pipeline.lambda_threshold = Threshold::new(l).map_err(|e: ScoreError| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(m) = o.min_attributes {
            self.pipeline.min_attributes = m;
        }
        if let Some(s) = o.question_style {
            self.pipeline.question_style = s;
        }
        if let Some(s) = o.seed {
            self.pipeline.seed = Some(s);
        }
        if let Some(k) = o.backend_kind {
            self.lvlm.kind = k;
        }
        if let Some(h) = o.helper_mode {
            self.pipeline.helper_mode = h;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.pipeline.helper_mode == HelperMode::Model && self.helper.is_none() {
            return Err(ConfigError::Invalid(
                "helper_mode \"model\" needs a `helper` backend; add one or set pipeline.helper_mode to \"rule_based\"".into(),
            ));
        }
        if let Some(h) = &self.helper {
            if h.kind == BackendKind::Simulator {
                return Err(ConfigError::Invalid("the simulator cannot act as the helper".into()));
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
