use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use super::{last_user_text, validate_request, BackendError, ChatBackend, ChatMessage, ChatReply, SamplingParams};
use crate::storage::{load_transcript, Role, TranscriptEvent};

/// Serves recorded responses back, keyed by prompt text. Repeated prompts are
/// served in recording order. Never invents a response.
pub struct ReplayBackend {
    label: String,
    queues: Mutex<HashMap<String, VecDeque<Vec<String>>>>,
}

impl ReplayBackend {
    pub fn new<'a>(events: impl IntoIterator<Item = &'a TranscriptEvent>, role: Role) -> Self {
        let mut queues: HashMap<String, VecDeque<Vec<String>>> = HashMap::new();
        let mut label = None;
        let mut sorted: Vec<&TranscriptEvent> = events.into_iter().filter(|e| e.stage.role() == role).collect();
        sorted.sort_by_key(|e| e.seq);
        for e in sorted {
            label.get_or_insert_with(|| e.backend.clone());
            queues.entry(e.prompt.clone()).or_default().push_back(e.responses.clone());
        }
        Self {
            label: format!("replay:{}", label.unwrap_or_else(|| "empty".into())),
            queues: Mutex::new(queues),
        }
    }

    /// A single exchange, mostly for tests.
    pub fn single(prompt: &str, response: &str) -> Self {
        let mut queues = HashMap::new();
        queues.insert(prompt.to_string(), VecDeque::from([vec![response.to_string()]]));
        Self { label: "replay:manual".into(), queues: Mutex::new(queues) }
    }

    pub fn from_file(path: &Path, role: Role) -> Result<Self, BackendError> {
        let loaded = load_transcript(path).map_err(|e| BackendError::Config(e.to_string()))?;
        if let Some(bad) = loaded.corrupt.first() {
            return Err(BackendError::Config(format!(
                "{}: corrupt transcript line {}",
                path.display(),
                bad.line
            )));
        }
        Ok(Self::new(loaded.events(), role))
    }

    /// Recorded exchanges not yet served.
    pub fn remaining(&self) -> usize {
        self.queues.lock().expect("replay lock").values().map(VecDeque::len).sum()
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> String {
        self.label.clone()
    }

    fn chat(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<ChatReply, BackendError> {
        validate_request(messages, params)?;
        let prompt = last_user_text(messages);
        let mut queues = self.queues.lock().expect("replay lock");
        let texts = queues
            .get_mut(prompt)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| BackendError::ReplayExhausted(prompt.to_string()))?;
        Ok(ChatReply::new(texts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replays_byte_for_byte_then_fails_loudly() {
        let r = ReplayBackend::single("q?", "  exact answer\n");
        let p = SamplingParams::greedy(None);
        let reply = r.chat(&[ChatMessage::user("q?")], &p).unwrap();
        assert_eq!(reply.texts, vec!["  exact answer\n"]);
        assert!(matches!(r.chat(&[ChatMessage::user("q?")], &p), Err(BackendError::ReplayExhausted(_))));
        assert!(matches!(r.chat(&[ChatMessage::user("other")], &p), Err(BackendError::ReplayExhausted(_))));
    }
}
