//! Recognizers for the question shapes the pipeline asks.

use crate::lexicon::normalize_name;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Question {
    /// "Is there a X in the image?"
    Existence(String),
    /// "Could you please describe the X in the image?"
    Describe(String),
    /// "Could you tell me all the objects that P in the image?"
    Coverage(String),
    /// "What is/has P in the image?", answered with the most obvious possessor only.
    MostObvious(String),
    /// "Please describe this image in detail."
    Caption,
}

const IMAGE_SUFFIXES: &[&str] = &[" in the image", " in this image", " in the picture", " in the photo"];

fn clean(text: &str) -> String {
    let t = text.trim().trim_end_matches(['?', '.', '!']).trim();
    t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn strip_image_suffix(s: &str) -> &str {
    IMAGE_SUFFIXES
        .iter()
        .find_map(|suf| s.strip_suffix(suf))
        .unwrap_or(s)
        .trim()
}

/// Map a predicate onto its singular-verb form: "are red" -> "is red".
pub fn canonical_predicate(pred: &str) -> String {
    let lower = clean(pred);
    let lower = lower.strip_prefix("the object ").unwrap_or(&lower).to_string();
    let lower = strip_image_suffix(&lower).to_string();
    let mut words: Vec<&str> = lower.split(' ').collect();
    if let Some(first) = words.first_mut() {
        *first = match *first {
            "are" => "is",
            "have" => "has",
            "were" => "was",
            other => other,
        };
    }
    words.join(" ")
}

/// Object named by a binary existence question, if the text is one.
pub fn parse_existence_question(text: &str) -> Option<String> {
    const PREFIXES: &[&str] = &["is there a ", "is there an ", "is there any ", "are there any ", "are there ", "is there "];
    let t = clean(text);
    let rest = PREFIXES.iter().find_map(|p| t.strip_prefix(p))?;
    let object = normalize_name(strip_image_suffix(rest));
    (!object.is_empty()).then_some(object)
}

pub fn parse_question(text: &str) -> Option<Question> {
    if let Some(obj) = parse_existence_question(text) {
        return Some(Question::Existence(obj));
    }
    let t = clean(text);
    if let Some(rest) = t.strip_prefix("could you please describe the ") {
        let obj = normalize_name(strip_image_suffix(rest));
        return (!obj.is_empty()).then_some(Question::Describe(obj));
    }
    if let Some(rest) = t.strip_prefix("could you tell me all the objects that ") {
        let pred = canonical_predicate(strip_image_suffix(rest));
        return (!pred.is_empty()).then_some(Question::Coverage(pred));
    }
    if t.contains("describe this image") || t.contains("describe the image") || t.contains("what do you see") {
        return Some(Question::Caption);
    }
    for verb in ["what is ", "what has ", "what are ", "what have "] {
        if let Some(rest) = t.strip_prefix(verb) {
            let padded = format!(" {rest}");
            let body = strip_image_suffix(&padded);
            if body.is_empty() {
                return Some(Question::Caption);
            }
            return Some(Question::MostObvious(canonical_predicate(&format!("{verb}{body}")[5..])));
        }
    }
    None
}
