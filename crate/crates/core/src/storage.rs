//! Transcript persistence: one JSON object per line.
//!
//! A transcript file holds a header line, the model-call events in sequence
//! order, one line per examinee object and a closing result line. Loading is
//! tolerant: every parseable line is returned together with a list of the
//! lines that could not be parsed.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{ExamineeObject, Threshold};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serializing transcript line: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("{path}: {count} corrupt line(s), first at line {first_line}")]
    Corrupt { path: PathBuf, count: usize, first_line: usize },
    #[error("{path}: transcript is missing its {what} line")]
    Incomplete { path: PathBuf, what: &'static str },
    #[error("events out of order: sequence {got} after {prev}")]
    OutOfOrder { prev: u64, got: u64 },
}

/// Which stage issued a model call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    InitialResponse,
    ExtractObjects,
    Describe,
    ExtractAttributes,
    Inquire,
    LoopCheck,
    Refine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Lvlm,
    Helper,
}

impl Stage {
    pub fn role(self) -> Role {
        match self {
            Stage::InitialResponse | Stage::Describe | Stage::Inquire => Role::Lvlm,
            _ => Role::Helper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub run_id: String,
    pub seq: u64,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    pub prompt_sha256: String,
    pub prompt: String,
    pub responses: Vec<String>,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
    pub retries: u32,
    #[serde(default)]
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Binary,
    OpenEnded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub run_id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub question_kind: QuestionKind,
    pub threshold: Threshold,
    pub lvlm: String,
    pub helper: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub original_response: String,
    pub revised_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queried_object: Option<String>,
    pub short_circuited: bool,
    pub flagged: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptLine {
    Header(TranscriptHeader),
    Event(TranscriptEvent),
    Object(ExamineeObject),
    Result(RunResult),
}

/// A line that failed to parse, by 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptLine {
    pub line: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedLines {
    pub lines: Vec<TranscriptLine>,
    pub corrupt: Vec<CorruptLine>,
}

impl LoadedLines {
    pub fn events(&self) -> impl Iterator<Item = &TranscriptEvent> {
        self.lines.iter().filter_map(|l| match l {
            TranscriptLine::Event(e) => Some(e),
            _ => None,
        })
    }
}

/// Single-writer, append-only transcript file. Data is fsynced on [`finish`](Self::finish).
pub struct TranscriptWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_seq: Option<u64>,
}

impl TranscriptWriter {
    pub fn create(path: &Path) -> Result<Self, StorageError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| StorageError::Io { path: path.to_path_buf(), source })?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file), last_seq: None })
    }

    pub fn append(&mut self, line: &TranscriptLine) -> Result<(), StorageError> {
        if let TranscriptLine::Event(e) = line {
            if let Some(prev) = self.last_seq {
                if e.seq <= prev {
                    return Err(StorageError::OutOfOrder { prev, got: e.seq });
                }
            }
            self.last_seq = Some(e.seq);
        }
        let json = serde_json::to_string(line)?;
        writeln!(self.out, "{json}").map_err(|source| self.io(source))
    }

    pub fn finish(mut self) -> Result<(), StorageError> {
        self.out.flush().map_err(|source| self.io(source))?;
        let file = self.out.get_ref();
        file.sync_all().map_err(|source| StorageError::Io { path: self.path.clone(), source })
    }

    fn io(&self, source: std::io::Error) -> StorageError {
        StorageError::Io { path: self.path.clone(), source }
    }
}

/// Write `lines` to a fresh file at `path`, replacing any previous content.
pub fn persist_transcript(path: &Path, lines: &[TranscriptLine]) -> Result<(), StorageError> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|source| StorageError::Io { path: path.to_path_buf(), source })?;
    }
    let mut w = TranscriptWriter::create(path)?;
    for line in lines {
        w.append(line)?;
    }
    w.finish()
}

/// Read every parseable line; corrupt lines are reported, not fatal.
pub fn load_transcript(path: &Path) -> Result<LoadedLines, StorageError> {
    let file = File::open(path).map_err(|source| StorageError::Io { path: path.to_path_buf(), source })?;
    let mut loaded = LoadedLines::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StorageError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TranscriptLine>(&line) {
            Ok(parsed) => loaded.lines.push(parsed),
            Err(e) => loaded.corrupt.push(CorruptLine { line: idx + 1, error: e.to_string() }),
        }
    }
    Ok(loaded)
}

/// Serialize lines to the exact bytes [`persist_transcript`] writes.
pub fn to_jsonl(lines: &[TranscriptLine]) -> Result<String, StorageError> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(seq: u64) -> TranscriptLine {
        TranscriptLine::Event(TranscriptEvent {
            run_id: "r".into(),
            seq,
            stage: Stage::Inquire,
            object: Some("banana".into()),
            prompt_sha256: "00".into(),
            prompt: format!("prompt {seq}"),
            responses: vec![format!("answer {seq}")],
            backend: "sim".into(),
            duration_ms: None,
            retries: 0,
            cached: false,
        })
    }

    #[test]
    fn round_trip_200_events() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let lines: Vec<_> = (0..200).map(event).collect();
        persist_transcript(&path, &lines).unwrap();
        let loaded = load_transcript(&path).unwrap();
        assert!(loaded.corrupt.is_empty());
        assert_eq!(loaded.lines, lines);
    }

    #[test]
    fn truncated_last_line_keeps_prior_events() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let lines: Vec<_> = (0..10).map(event).collect();
        let mut text = to_jsonl(&lines).unwrap();
        text.truncate(text.len() - 20);
        std::fs::write(&path, text).unwrap();
        let loaded = load_transcript(&path).unwrap();
        assert_eq!(loaded.lines.len(), 9);
        assert_eq!(loaded.lines[..], lines[..9]);
        assert_eq!(loaded.corrupt.len(), 1);
        assert_eq!(loaded.corrupt[0].line, 10);
    }

    #[test]
    fn writer_rejects_out_of_order_events() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TranscriptWriter::create(&dir.path().join("t.jsonl")).unwrap();
        w.append(&event(3)).unwrap();
        assert!(matches!(w.append(&event(3)), Err(StorageError::OutOfOrder { .. })));
    }
}
