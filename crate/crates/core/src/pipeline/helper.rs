//! The text-only helper that extracts objects and attributes, judges loops and
//! rewrites responses. [`ModelHelper`] prompts a language model;
//! [`RuleHelper`] does the same jobs with a noun lexicon and string rules so
//! the whole pipeline can run without any model.

use std::sync::Arc;

use crate::backends::{ChatBackend, ChatMessage, SamplingParams};
use crate::lexicon::{mentions, normalize_name, singularize_word, NounLexicon};
use crate::prompts::{PromptRegistry, TemplateId};
use crate::storage::Stage;

use super::transcript::CallLog;
use super::PipelineError;

pub trait Helper: Send + Sync {
    fn id(&self) -> String;

    /// Normalized object names in order of first mention.
    fn extract_objects(&self, response: &str, log: &mut CallLog) -> Result<Vec<String>, PipelineError>;

    /// Attribute statements about `object`, phrased with "The object" as subject.
    fn extract_attributes(&self, description: &str, object: &str, log: &mut CallLog) -> Result<Vec<String>, PipelineError>;

    /// `Some(true)` if the answer names the object, `None` if the judgment was unusable.
    fn judge_loop(&self, answer: &str, object: &str, log: &mut CallLog) -> Result<Option<bool>, PipelineError>;

    /// Rewrite `response` without the `flagged` objects.
    fn rewrite(&self, response: &str, flagged: &[String], log: &mut CallLog) -> Result<String, PipelineError>;
}

/// Split text into sentences, keeping terminal punctuation.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        let at_break = matches!(c, '.' | '!' | '?' | '\n')
            && chars.get(i + 1).is_none_or(|&(_, n)| n.is_whitespace());
        if at_break {
            let end = pos + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() && s != "." {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    t
}

fn is_none_marker(text: &str) -> bool {
    let t = text.trim().trim_end_matches('.').to_lowercase();
    t == "none" || t == "n/a" || t.is_empty()
}

/// Helper backed by a chat model and the prompt registry.
pub struct ModelHelper {
    backend: Arc<dyn ChatBackend>,
    prompts: PromptRegistry,
    params: SamplingParams,
}

impl ModelHelper {
    pub fn new(backend: Arc<dyn ChatBackend>, prompts: PromptRegistry, seed: Option<u64>) -> Self {
        Self { backend, prompts, params: SamplingParams::greedy(seed) }
    }

    fn ask(&self, stage: Stage, prompt: String, log: &mut CallLog) -> Result<String, PipelineError> {
        let reply = log
            .call(&*self.backend, stage, &[ChatMessage::user(prompt)], &self.params)
            .map_err(|e| PipelineError::HelperFailure(format!("{stage:?}: {e}")))?;
        Ok(reply.first().to_string())
    }
}

/// Parse a helper's object list: one per line or comma separated, "None" for empty.
pub fn parse_object_list(text: &str) -> Result<Vec<String>, PipelineError> {
    if text.trim().is_empty() {
        return Err(PipelineError::HelperFailure("empty object list".into()));
    }
    if is_none_marker(text) {
        return Ok(Vec::new());
    }
    let mut out: Vec<String> = Vec::new();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let items: Vec<&str> = if lines.len() == 1 { lines[0].split([',', ';']).collect() } else { lines };
    for item in items {
        let item = strip_list_marker(item).trim_end_matches(['.', ',']);
        if is_none_marker(item) {
            continue;
        }
        if item.split_whitespace().count() > 6 {
            return Err(PipelineError::HelperFailure(format!("not an object name: {item:?}")));
        }
        let name = normalize_name(item);
        if !name.is_empty() && !out.contains(&name) {
            out.push(name);
        }
    }
    Ok(out)
}

impl Helper for ModelHelper {
    fn id(&self) -> String {
        format!("model:{}", self.backend.id())
    }

    fn extract_objects(&self, response: &str, log: &mut CallLog) -> Result<Vec<String>, PipelineError> {
        let prompt = self.prompts.render(TemplateId::ObjectExtraction, &[("response", response)])?;
        parse_object_list(&self.ask(Stage::ExtractObjects, prompt, log)?)
    }

    fn extract_attributes(&self, description: &str, object: &str, log: &mut CallLog) -> Result<Vec<String>, PipelineError> {
        let prompt = self
            .prompts
            .render(TemplateId::AttributeExtraction, &[("object", object), ("description", description)])?;
        let text = self.ask(Stage::ExtractAttributes, prompt, log)?;
        if is_none_marker(&text) {
            return Ok(Vec::new());
        }
        Ok(text
            .lines()
            .map(strip_list_marker)
            .filter(|l| !is_none_marker(l))
            .map(str::to_string)
            .collect())
    }

    fn judge_loop(&self, answer: &str, object: &str, log: &mut CallLog) -> Result<Option<bool>, PipelineError> {
        let prompt = self.prompts.render(TemplateId::LoopCheck, &[("object", object), ("answer", answer)])?;
        let text = self.ask(Stage::LoopCheck, prompt, log)?;
        Ok(match text.trim().trim_end_matches(['.', '!']).to_lowercase().as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        })
    }

    fn rewrite(&self, response: &str, flagged: &[String], log: &mut CallLog) -> Result<String, PipelineError> {
        let list = flagged.join(", ");
        let prompt = self
            .prompts
            .render(TemplateId::Refinement, &[("response", response), ("hallucinated_objects", &list)])?;
        Ok(self.ask(Stage::Refine, prompt, log)?.trim().to_string())
    }
}

/// Model-free helper: lexicon extraction, string masking, lemma containment.
#[derive(Debug, Clone)]
pub struct RuleHelper {
    lexicon: NounLexicon,
}

const NEGATION_CUES: &[&str] = &["no", "not", "without", "none", "nothing"];

impl RuleHelper {
    pub fn new(lexicon: NounLexicon) -> Self {
        Self { lexicon }
    }

    pub fn standard() -> Self {
        Self::new(NounLexicon::standard())
    }

    pub fn lexicon(&self) -> &NounLexicon {
        &self.lexicon
    }

    /// Replace every mention of `object` in one sentence with "object",
    /// and a leading pronoun with "The object".
    fn mask_sentence(sentence: &str, object: &str) -> Option<String> {
        let target: Vec<String> = object.split(' ').map(singularize_word).collect();
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let norm = |w: &str| {
            let core = w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'').to_lowercase();
            let core = core.strip_suffix("'s").map(str::to_string).unwrap_or(core);
            singularize_word(&core)
        };
        let mut out: Vec<String> = Vec::with_capacity(words.len());
        let mut hit = false;
        let mut i = 0;
        while i < words.len() {
            let n = target.len();
            if i + n <= words.len() && (0..n).all(|k| norm(words[i + k]) == target[k]) {
                let last = words[i + n - 1];
                let possessive = last.to_lowercase().contains("'s");
                let trailing: String = last.chars().rev().take_while(|c| !c.is_alphanumeric()).collect::<Vec<_>>().into_iter().rev().collect();
                let trailing = trailing.trim_start_matches("'s").to_string();
                out.push(format!("object{}{}", if possessive { "'s" } else { "" }, trailing));
                hit = true;
                i += n;
            } else {
                out.push(words[i].to_string());
                i += 1;
            }
        }
        if !hit {
            let first = words.first()?.to_lowercase();
            let lead = match first.as_str() {
                "it" | "this" => "The object",
                "its" => "The object's",
                _ => return None,
            };
            out[0] = lead.to_string();
        }
        let mut text = out.join(" ");
        if !text.to_lowercase().starts_with("the object") && text.to_lowercase().starts_with("object") {
            text = format!("The {text}");
        }
        let text = text.trim_end_matches(['.', '!', '?']).to_string();
        let mut chars = text.chars();
        Some(match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => text,
        })
    }
}

impl Helper for RuleHelper {
    fn id(&self) -> String {
        "rules".into()
    }

    fn extract_objects(&self, response: &str, _log: &mut CallLog) -> Result<Vec<String>, PipelineError> {
        let mut out: Vec<String> = Vec::new();
        for sentence in split_sentences(response) {
            let lowered = sentence.to_lowercase();
            let words = crate::lexicon::tokenize(&lowered);
            if words.iter().any(|w| NEGATION_CUES.contains(&w.as_str()) || w.ends_with("n't")) {
                continue;
            }
            for name in self.lexicon.find_all(sentence) {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        Ok(out)
    }

    fn extract_attributes(&self, description: &str, object: &str, _log: &mut CallLog) -> Result<Vec<String>, PipelineError> {
        let object = normalize_name(object);
        Ok(split_sentences(description)
            .into_iter()
            .filter_map(|s| Self::mask_sentence(s, &object))
            .collect())
    }

    fn judge_loop(&self, answer: &str, object: &str, _log: &mut CallLog) -> Result<Option<bool>, PipelineError> {
        let object = normalize_name(object);
        let found = self.lexicon.find_all_with(answer, &object);
        Ok(Some(found.contains(&object)))
    }

    fn rewrite(&self, response: &str, flagged: &[String], _log: &mut CallLog) -> Result<String, PipelineError> {
        Ok(split_sentences(response)
            .into_iter()
            .filter(|s| !flagged.iter().any(|f| mentions(s, f)))
            .collect::<Vec<_>>()
            .join(" "))
    }
}
