//! Prompt templates with `{name}` placeholders.
//!
//! Template texts live in `prompts/`, one file per template, and are pinned by
//! a manifest of `id -> file -> version -> sha256`. The built-in registry is
//! compiled in; [`PromptRegistry::from_dir`] loads an on-disk copy and checks
//! every file against its manifest hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("empty binding for placeholder `{0}`")]
    EmptyBinding(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{id}` does not match its pinned hash (manifest {expected}, file {actual})")]
    HashMismatch { id: TemplateId, expected: String, actual: String },
    #[error("malformed template `{id}`: {reason}")]
    Malformed { id: TemplateId, reason: String },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ObjectExtraction,
    DescribeObject,
    AttributeExtraction,
    #[serde(rename = "question_formulation_full")]
    QuestionFormulationFull,
    #[serde(rename = "question_formulation_simple")]
    QuestionFormulationSimple,
    LoopCheck,
    Refinement,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::ObjectExtraction,
        TemplateId::DescribeObject,
        TemplateId::AttributeExtraction,
        TemplateId::QuestionFormulationFull,
        TemplateId::QuestionFormulationSimple,
        TemplateId::LoopCheck,
        TemplateId::Refinement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ObjectExtraction => "object_extraction",
            Self::DescribeObject => "describe_object",
            Self::AttributeExtraction => "attribute_extraction",
            Self::QuestionFormulationFull => "question_formulation_full",
            Self::QuestionFormulationSimple => "question_formulation_simple",
            Self::LoopCheck => "loop_check",
            Self::Refinement => "refinement",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: TemplateId,
    pub file: String,
    pub version: u32,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub templates: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub text: String,
    pub placeholders: BTreeSet<String>,
    pub version: u32,
}

/// One piece of a parsed template.
enum Segment<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        match rest[open + 1..].find('}') {
            Some(len) if is_slot_name(&rest[open + 1..open + 1 + len]) => {
                out.push(Segment::Literal(&rest[..open]));
                out.push(Segment::Slot(&rest[open + 1..open + 1 + len]));
                rest = &rest[open + 2 + len..];
            }
            _ => {
                out.push(Segment::Literal(&rest[..=open]));
                rest = &rest[open + 1..];
            }
        }
    }
    out.push(Segment::Literal(rest));
    out
}

/// Names of all `{name}` placeholders in `text`.
pub fn placeholders_of(text: &str) -> BTreeSet<String> {
    segments(text)
        .into_iter()
        .filter_map(|s| match s {
            Segment::Slot(name) => Some(name.to_string()),
            Segment::Literal(_) => None,
        })
        .collect()
}

/// True if `text` still contains something shaped like a placeholder.
pub fn has_unresolved_placeholder(text: &str) -> bool {
    !placeholders_of(text).is_empty()
}

impl PromptTemplate {
    pub fn new(id: TemplateId, text: impl Into<String>, version: u32) -> Self {
        let text = text.into();
        let placeholders = placeholders_of(&text);
        Self { id, text, placeholders, version }
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let lookup: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        for name in &self.placeholders {
            match lookup.get(name.as_str()) {
                None => return Err(PromptError::MissingBinding(name.clone())),
                Some(v) if v.trim().is_empty() => return Err(PromptError::EmptyBinding(name.clone())),
                Some(_) => {}
            }
        }
        let mut out = String::with_capacity(self.text.len() + 64);
        for seg in segments(&self.text) {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(name) => out.push_str(lookup[name]),
            }
        }
        if self.id == TemplateId::QuestionFormulationSimple {
            out = normalize_is_has(&out);
        }
        Ok(out)
    }
}

/// Resolve the combined "is/has" slot against the verb the attribute starts with.
fn normalize_is_has(text: &str) -> String {
    const RULES: &[(&str, &str)] = &[
        ("is/has is ", "is "),
        ("is/has are ", "is "),
        ("is/has has ", "has "),
        ("is/has have ", "has "),
    ];
    for (from, to) in RULES {
        if text.contains(from) {
            return text.replacen(from, to, 1);
        }
    }
    text.to_string()
}

const BUILTIN_MANIFEST: &str = include_str!("../prompts/manifest.json");

fn builtin_text(file: &str) -> Option<&'static str> {
    Some(match file {
        "object_extraction.txt" => include_str!("../prompts/object_extraction.txt"),
        "describe_object.txt" => include_str!("../prompts/describe_object.txt"),
        "attribute_extraction.txt" => include_str!("../prompts/attribute_extraction.txt"),
        "question_full.txt" => include_str!("../prompts/question_full.txt"),
        "question_simple.txt" => include_str!("../prompts/question_simple.txt"),
        "loop_check.txt" => include_str!("../prompts/loop_check.txt"),
        "refinement.txt" => include_str!("../prompts/refinement.txt"),
        _ => return None,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Immutable set of templates keyed by id.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<TemplateId, PromptTemplate>,
    manifest: Manifest,
}

impl PromptRegistry {
    /// The compiled-in templates. Panics if a built-in file drifted from the manifest.
    pub fn builtin() -> Self {
        let manifest: Manifest = serde_json::from_str(BUILTIN_MANIFEST).expect("builtin manifest");
        Self::assemble(manifest, |file| {
            builtin_text(file)
                .map(str::to_string)
                .ok_or_else(|| PromptError::UnknownTemplate(file.to_string()))
        })
        .expect("builtin prompt templates are consistent")
    }

    /// Load `manifest.json` and the template files it names from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path)
            .map_err(|source| PromptError::Io { path: manifest_path.clone(), source })?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        Self::assemble(manifest, |file| {
            let path = dir.join(file);
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })
        })
    }

    fn assemble(
        manifest: Manifest,
        mut read: impl FnMut(&str) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for entry in &manifest.templates {
            let text = read(&entry.file)?;
            let actual = sha256_hex(text.as_bytes());
            if actual != entry.sha256 {
                return Err(PromptError::HashMismatch {
                    id: entry.id,
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            let template = PromptTemplate::new(entry.id, text, entry.version);
            if template.placeholders.is_empty() {
                return Err(PromptError::Malformed {
                    id: entry.id,
                    reason: "template has no placeholders".into(),
                });
            }
            templates.insert(entry.id, template);
        }
        Ok(Self { templates, manifest })
    }

    pub fn get(&self, id: TemplateId) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn render(&self, id: TemplateId, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        self.get(id)?.render(bindings)
    }

    /// All templates, ordered by id.
    pub fn templates(&self) -> Vec<&PromptTemplate> {
        self.templates.values().collect()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// All built-in templates, ordered by id.
pub fn registry() -> Vec<PromptTemplate> {
    PromptRegistry::builtin().templates().into_iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn describe_object_format() {
        let reg = PromptRegistry::builtin();
        let q = reg.render(TemplateId::DescribeObject, &[("object", "dining table")]).unwrap();
        assert_eq!(q, "Could you please describe the dining table in the image?");
    }

    #[test]
    fn coverage_question_format() {
        let reg = PromptRegistry::builtin();
        let q = reg
            .render(TemplateId::QuestionFormulationFull, &[("attribute", "are on the table")])
            .unwrap();
        assert_eq!(q, "Could you tell me all the objects that are on the table in the image?");
    }

    #[test]
    fn simple_question_resolves_is_has() {
        let reg = PromptRegistry::builtin();
        let r = |a| reg.render(TemplateId::QuestionFormulationSimple, &[("attribute", a)]).unwrap();
        assert_eq!(r("is red"), "What is red in the image?");
        assert_eq!(r("has four legs"), "What has four legs in the image?");
        assert_eq!(r("are on the table"), "What is on the table in the image?");
        assert_eq!(r("have handles"), "What has handles in the image?");
    }

    #[test]
    fn missing_and_empty_bindings() {
        let reg = PromptRegistry::builtin();
        assert!(matches!(
            reg.render(TemplateId::LoopCheck, &[("object", "apple")]),
            Err(PromptError::MissingBinding(name)) if name == "answer"
        ));
        assert!(matches!(
            reg.render(TemplateId::DescribeObject, &[("object", " ")]),
            Err(PromptError::EmptyBinding(_))
        ));
    }

    #[test]
    fn registry_has_seven_nonempty_templates() {
        let all = registry();
        assert_eq!(all.len(), 7);
        let ids: Vec<_> = all.iter().map(|t| t.id).collect();
        assert_eq!(ids, TemplateId::ALL.to_vec());
        assert!(all.iter().all(|t| !t.placeholders.is_empty()));
    }

    #[test]
    fn helper_prompts_carry_behavior_contracts() {
        let reg = PromptRegistry::builtin();
        let text = |id| reg.get(id).unwrap().text.clone();
        assert!(text(TemplateId::AttributeExtraction).contains("\"The object\""));
        assert!(text(TemplateId::LoopCheck).contains("Yes or No"));
        assert!(text(TemplateId::ObjectExtraction).contains("countable"));
    }

    #[test]
    fn braces_that_are_not_slots_are_literal() {
        let t = PromptTemplate::new(TemplateId::Refinement, "a {b} {not a slot} {}", 1);
        assert_eq!(t.placeholders.len(), 1);
        assert_eq!(t.render(&[("b", "x")]).unwrap(), "a x {not a slot} {}");
    }
}
