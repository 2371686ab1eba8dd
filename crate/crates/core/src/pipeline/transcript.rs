use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backends::{last_user_text, BackendError, ChatBackend, ChatMessage, ChatReply, SamplingParams};
use crate::score::ExamineeObject;
use crate::storage::{
    load_transcript, persist_transcript, RunResult, Stage, StorageError, TranscriptEvent, TranscriptHeader, TranscriptLine,
};

/// Collects the model calls made on behalf of one object (or the run itself).
/// Sequence numbers are assigned when the transcript is assembled.
#[derive(Debug, Default)]
pub struct CallLog {
    run_id: String,
    object: Option<String>,
    events: Vec<TranscriptEvent>,
}

impl CallLog {
    pub fn new(run_id: &str, object: Option<&str>) -> Self {
        Self { run_id: run_id.to_string(), object: object.map(str::to_string), events: Vec::new() }
    }

    pub fn call(
        &mut self,
        backend: &dyn ChatBackend,
        stage: Stage,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<ChatReply, BackendError> {
        let reply = backend.chat(messages, params)?;
        let prompt = last_user_text(messages).to_string();
        self.events.push(TranscriptEvent {
            run_id: self.run_id.clone(),
            seq: 0,
            stage,
            object: self.object.clone(),
            prompt_sha256: hex::encode(Sha256::digest(prompt.as_bytes())),
            prompt,
            responses: reply.texts.clone(),
            backend: backend.id(),
            duration_ms: reply.elapsed.map(|d| d.as_millis() as u64),
            retries: reply.retries,
            cached: reply.cached,
        });
        Ok(reply)
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TranscriptEvent> {
        self.events
    }
}

/// Everything one pipeline run did, in a replayable order.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTranscript {
    pub header: TranscriptHeader,
    pub events: Vec<TranscriptEvent>,
    pub objects: Vec<ExamineeObject>,
    /// Missing when the run aborted.
    pub result: Option<RunResult>,
}

impl PipelineTranscript {
    pub fn run_id(&self) -> &str {
        &self.header.run_id
    }

    pub fn object(&self, name: &str) -> Option<&ExamineeObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn to_lines(&self) -> Vec<TranscriptLine> {
        let mut lines = Vec::with_capacity(self.events.len() + self.objects.len() + 2);
        lines.push(TranscriptLine::Header(self.header.clone()));
        lines.extend(self.events.iter().cloned().map(TranscriptLine::Event));
        lines.extend(self.objects.iter().cloned().map(TranscriptLine::Object));
        if let Some(r) = &self.result {
            lines.push(TranscriptLine::Result(r.clone()));
        }
        lines
    }

    /// Rebuild from parsed lines; `None` without a header.
    pub fn from_lines(lines: Vec<TranscriptLine>) -> Option<Self> {
        let mut header = None;
        let mut events = Vec::new();
        let mut objects = Vec::new();
        let mut result = None;
        for line in lines {
            match line {
                TranscriptLine::Header(h) => header = Some(h),
                TranscriptLine::Event(e) => events.push(e),
                TranscriptLine::Object(o) => objects.push(o),
                TranscriptLine::Result(r) => result = Some(r),
            }
        }
        Some(Self { header: header?, events, objects, result })
    }

    pub fn to_jsonl(&self) -> String {
        crate::storage::to_jsonl(&self.to_lines()).expect("transcript serializes")
    }
}

/// Write each transcript to `dir/{index:04}-{run_id}.jsonl`.
pub fn write_transcript_dir(dir: &Path, transcripts: &[PipelineTranscript]) -> Result<(), StorageError> {
    let io = |source| StorageError::Io { path: dir.to_path_buf(), source };
    std::fs::create_dir_all(dir).map_err(io)?;
    for (i, t) in transcripts.iter().enumerate() {
        persist_transcript(&dir.join(format!("{i:04}-{}.jsonl", t.run_id())), &t.to_lines())?;
    }
    Ok(())
}

/// Every `*.jsonl` transcript in `dir`, in file-name order. Corrupt lines are
/// skipped with a warning; files without a header are skipped.
pub fn read_transcript_dir(dir: &Path) -> Result<Vec<PipelineTranscript>, StorageError> {
    let io = |source| StorageError::Io { path: dir.to_path_buf(), source };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let loaded = load_transcript(&p)?;
        for bad in &loaded.corrupt {
            tracing::warn!("{}:{}: skipping corrupt line: {}", p.display(), bad.line, bad.error);
        }
        match PipelineTranscript::from_lines(loaded.lines) {
            Some(t) => out.push(t),
            None => tracing::warn!("{}: no header, skipped", p.display()),
        }
    }
    Ok(out)
}
