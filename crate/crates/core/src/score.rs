//! Loop outcomes, the loop rate and the threshold decision.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::normalize_name;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("no loop outcomes to score")]
    EmptyOutcomes,
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("loop outcome must be 0.0 or 1.0, got {0}")]
    InvalidOutcome(f64),
}

/// Whether one attribute-to-object answer named the examinee object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum LoopOutcome {
    Open,
    Closed,
}

impl LoopOutcome {
    pub fn from_closed(closed: bool) -> Self {
        if closed {
            Self::Closed
        } else {
            Self::Open
        }
    }

    pub fn is_closed(self) -> bool {
        self == Self::Closed
    }

    pub fn value(self) -> f64 {
        match self {
            Self::Open => 0.0,
            Self::Closed => 1.0,
        }
    }
}

impl TryFrom<f64> for LoopOutcome {
    type Error = ScoreError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        if v == 1.0 {
            Ok(Self::Closed)
        } else if v == 0.0 {
            Ok(Self::Open)
        } else {
            Err(ScoreError::InvalidOutcome(v))
        }
    }
}

impl From<LoopOutcome> for f64 {
    fn from(o: LoopOutcome) -> f64 {
        o.value()
    }
}

/// Loop rate of one object, kept as an exact count over the number of
/// attribute-to-object questions asked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoopRateScore {
    closed: u32,
    n_questions: u32,
}

impl LoopRateScore {
    pub fn new(closed: u32, n_questions: u32) -> Result<Self, ScoreError> {
        if n_questions == 0 {
            return Err(ScoreError::EmptyOutcomes);
        }
        assert!(closed <= n_questions, "closed count exceeds question count");
        Ok(Self { closed, n_questions })
    }

    pub fn closed(&self) -> u32 {
        self.closed
    }

    pub fn n_questions(&self) -> u32 {
        self.n_questions
    }

    pub fn value(&self) -> f64 {
        f64::from(self.closed) / f64::from(self.n_questions)
    }
}

impl fmt::Display for LoopRateScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.value())
    }
}

/// Mean of the binary loop outcomes.
pub fn loop_rate(outcomes: &[LoopOutcome]) -> Result<LoopRateScore, ScoreError> {
    let closed = outcomes.iter().filter(|o| o.is_closed()).count();
    LoopRateScore::new(closed as u32, outcomes.len() as u32)
}

/// Hallucination threshold λ, validated to lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Result<Self, ScoreError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(ScoreError::InvalidThreshold(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The default grid `0.0, 0.1, ..., 0.9`, each point computed as `k / 10`.
    pub fn default_grid() -> Vec<Threshold> {
        (0..10).map(|k| Threshold(f64::from(k) / 10.0)).collect()
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self(0.4)
    }
}

impl TryFrom<f64> for Threshold {
    type Error = ScoreError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.0)
    }
}

/// Score attached to an object: measured from loop checks, or the sentinel for
/// objects that yielded no attributes at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectScore {
    Measured(LoopRateScore),
    NoAttributes,
}

impl ObjectScore {
    /// The sentinel counts as a rate of 0.0.
    pub fn value(&self) -> f64 {
        match self {
            Self::Measured(s) => s.value(),
            Self::NoAttributes => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Existent,
    Hallucinated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub score: ObjectScore,
    pub threshold: Threshold,
}

impl Verdict {
    pub fn is_hallucinated(&self) -> bool {
        self.kind == VerdictKind::Hallucinated
    }
}

/// Hallucinated iff the score is strictly below the threshold.
pub fn classify(score: ObjectScore, threshold: Threshold) -> Verdict {
    let kind = if score.value() < threshold.value() {
        VerdictKind::Hallucinated
    } else {
        VerdictKind::Existent
    };
    Verdict { kind, score, threshold }
}

/// Like [`classify`], but takes a raw threshold and validates it.
pub fn classify_raw(score: LoopRateScore, threshold: f64) -> Result<Verdict, ScoreError> {
    Ok(classify(ObjectScore::Measured(score), Threshold::new(threshold)?))
}

/// An object mention under test and everything gathered about it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExamineeObject {
    pub name: String,
    pub descriptions: Vec<String>,
    pub attributes: Vec<String>,
    pub questions: Vec<String>,
    pub answers: Vec<String>,
    pub outcomes: Vec<LoopOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ExamineeObject {
    /// Panics on a name that normalizes to nothing.
    pub fn new(name: &str) -> Self {
        let name = normalize_name(name);
        assert!(!name.is_empty(), "examinee object name must be non-empty");
        Self { name, ..Default::default() }
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn score(&self) -> ObjectScore {
        match loop_rate(&self.outcomes) {
            Ok(s) => ObjectScore::Measured(s),
            Err(_) => ObjectScore::NoAttributes,
        }
    }

    /// All per-attribute stage lists have the same length.
    pub fn is_consistent(&self) -> bool {
        let n = self.attributes.len();
        self.questions.len() == n && self.answers.len() == n && self.outcomes.len() == n
    }
}
