//! Benchmark harness: record files, answer parsing, POPE and MME metrics,
//! threshold sweeps and attribute-count statistics.

mod harness;
mod metrics;
mod sweep;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use harness::{predictions, run_records, run_simulated};
pub use metrics::{evaluate_mme, evaluate_pope, mme_pairs, percent, to_f64, Confusion, MetricsReport, MmeScores, Rational};
pub use sweep::{attribute_count_stats, count_stats, match_transcripts, sweep_lambda, AttributeCountStats, ClassStats, SweepPoint};

use crate::backends::{ChatBackend, ChatMessage, SamplingParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: duplicate record for image `{image_id}`: {question:?}")]
    DuplicateRecord { path: String, line: usize, image_id: String, question: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{predictions} predictions for {records} records")]
    LengthMismatch { predictions: usize, records: usize },
    #[error("image `{0}` does not have exactly two questions")]
    MalformedPair(String),
    #[error("no transcript for record ({image_id}, {question:?})")]
    MissingTranscript { image_id: String, question: String },
    #[error("transcript {run_id} has no loop-rate score for `{object}`")]
    MissingScores { run_id: String, object: String },
    #[error("no {0} objects to summarize")]
    EmptyClass(&'static str),
    #[error("nothing to evaluate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn flip(self) -> Self {
        match self {
            Label::Yes => Label::No,
            Label::No => Label::Yes,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Yes => "yes",
            Label::No => "no",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Random,
    Popular,
    Adversarial,
    Existence,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Random => "random",
            Setting::Popular => "popular",
            Setting::Adversarial => "adversarial",
            Setting::Existence => "existence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub image_id: String,
    pub question: String,
    pub label: Label,
    pub setting: Setting,
}

/// Read a JSONL record file. Duplicate (image_id, question) pairs are rejected.
pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io { path: p.clone(), source })?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| EvalError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: p.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.question.trim().is_empty() || rec.image_id.trim().is_empty() {
            return Err(EvalError::Parse { path: p, line: line_no, message: "empty image_id or question".into() });
        }
        if !seen.insert((rec.image_id.clone(), rec.question.clone())) {
            return Err(EvalError::DuplicateRecord {
                path: p,
                line: line_no,
                image_id: rec.image_id,
                question: rec.question,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[EvalRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryAnswer {
    Yes,
    No,
    Unparseable,
}

impl BinaryAnswer {
    pub fn label(self) -> Option<Label> {
        match self {
            BinaryAnswer::Yes => Some(Label::Yes),
            BinaryAnswer::No => Some(Label::No),
            BinaryAnswer::Unparseable => None,
        }
    }

    /// Unparseable answers count as wrong.
    pub fn resolve(self, truth: Label) -> Label {
        self.label().unwrap_or(truth.flip())
    }
}

/// The first affirmation or negation cue in the text decides.
pub fn parse_binary_answer(text: &str) -> BinaryAnswer {
    let words: Vec<String> = text
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '’'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase().replace('’', "'"))
        .collect();
    for (i, w) in words.iter().enumerate() {
        let next = |k: usize| words.get(i + k).map(String::as_str);
        match w.as_str() {
            "yes" | "yeah" | "yep" => return BinaryAnswer::Yes,
            "no" | "not" | "none" | "nope" => return BinaryAnswer::No,
            w if w.ends_with("n't") => return BinaryAnswer::No,
            "there" if matches!(next(1), Some("is" | "are" | "exists" | "exist")) => {
                return if matches!(next(2), Some("no" | "not")) {
                    BinaryAnswer::No
                } else {
                    BinaryAnswer::Yes
                };
            }
            _ => {}
        }
    }
    BinaryAnswer::Unparseable
}

const JUDGE_PROMPT: &str = "Does the following answer to a yes-or-no question say yes or no? \
Reply with exactly one word: Yes or No.\n\nAnswer:\n";

/// [`parse_binary_answer`], asking `judge` to decide when no cue is found.
pub fn parse_binary_answer_with(text: &str, judge: Option<&dyn ChatBackend>) -> BinaryAnswer {
    let first = parse_binary_answer(text);
    let (BinaryAnswer::Unparseable, Some(judge)) = (first, judge) else {
        return first;
    };
    let msg = [ChatMessage::user(format!("{JUDGE_PROMPT}{text}"))];
    match judge.chat(&msg, &SamplingParams::greedy(None)) {
        Ok(reply) => match reply.first().trim().trim_end_matches('.').to_lowercase().as_str() {
            "yes" => BinaryAnswer::Yes,
            "no" => BinaryAnswer::No,
            _ => BinaryAnswer::Unparseable,
        },
        Err(e) => {
            tracing::warn!("answer judge failed: {e}");
            BinaryAnswer::Unparseable
        }
    }
}
