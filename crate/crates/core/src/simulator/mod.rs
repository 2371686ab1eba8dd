//! Deterministic scene-graph stand-in for a vision-language model.
//!
//! The simulator answers existence, describe, coverage and caption questions
//! from a ground-truth [`SceneGraph`]. Hallucination is injected only on the
//! existence and caption paths, and an asserted-but-absent object is described
//! with attributes that are either borrowed from real scene objects or drawn
//! from a fabricated pool. Coverage answers are always truthful, so an absent
//! object never closes a loop.

mod fixtures;
mod question;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use fixtures::{generate_fixtures, FixtureConfig, FixtureSet};
pub use question::{canonical_predicate, parse_existence_question, parse_question, Question};

use crate::backends::SamplingParams;
use crate::eval::Label;
use crate::lexicon::normalize_name;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("unrecognized question: {0:?}")]
    UnrecognizedQuestion(String),
    #[error("invalid scene `{image_id}`: {reason}")]
    InvalidScene { image_id: String, reason: String },
    #[error("invalid hallucination profile: {0}")]
    InvalidProfile(String),
    #[error("vocabulary too small: need {needed} nouns, have {have}")]
    VocabTooSmall { needed: usize, have: usize },
    #[error("invalid fixture request: {0}")]
    InvalidFixtureRequest(String),
    #[error("scene `{image_id}` has only {have} co-occurring absent objects, need {needed}")]
    InsufficientCooccurrence { image_id: String, needed: usize, have: usize },
    #[error("{path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub attributes: Vec<String>,
    pub salience: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
}

const ATTRIBUTE_VERBS: &[&str] = &["is", "are", "has", "have"];

impl SceneGraph {
    /// Normalizes object names and checks the scene invariants.
    pub fn new(image_id: impl Into<String>, objects: Vec<SceneObject>) -> Result<Self, SimulatorError> {
        let mut scene = Self { image_id: image_id.into(), objects };
        for obj in &mut scene.objects {
            obj.name = normalize_name(&obj.name);
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |reason: String| Err(SimulatorError::InvalidScene { image_id: self.image_id.clone(), reason });
        let mut seen = BTreeSet::new();
        for obj in &self.objects {
            let name = normalize_name(&obj.name);
            if name.is_empty() {
                return bad("object with empty name".into());
            }
            if !seen.insert(name.clone()) {
                return bad(format!("duplicate object `{name}`"));
            }
            if obj.attributes.is_empty() {
                return bad(format!("`{name}` has no attributes"));
            }
            if !(obj.salience > 0.0 && obj.salience.is_finite()) {
                return bad(format!("`{name}` has non-positive salience"));
            }
            for a in &obj.attributes {
                let verb = a.split_whitespace().next().unwrap_or("");
                if !ATTRIBUTE_VERBS.contains(&verb) {
                    return bad(format!("attribute `{a}` of `{name}` must start with is/are/has/have"));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        let name = normalize_name(name);
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.object(name).is_some()
    }

    /// Every distinct attribute phrase in the scene.
    pub fn all_attributes(&self) -> BTreeSet<String> {
        self.objects.iter().flat_map(|o| o.attributes.iter().cloned()).collect()
    }

    /// Objects that truly have the (canonicalized) predicate, most salient first.
    pub fn possessors(&self, predicate: &str) -> Vec<&SceneObject> {
        let wanted = canonical_predicate(predicate);
        let mut found: Vec<&SceneObject> = self
            .objects
            .iter()
            .filter(|o| o.attributes.iter().any(|a| canonical_predicate(a) == wanted))
            .collect();
        found.sort_by(|a, b| b.salience.total_cmp(&a.salience).then_with(|| a.name.cmp(&b.name)));
        found
    }

    /// Objects ordered by salience, most salient first.
    pub fn by_salience(&self) -> Vec<&SceneObject> {
        let mut objs: Vec<&SceneObject> = self.objects.iter().collect();
        objs.sort_by(|a, b| b.salience.total_cmp(&a.salience).then_with(|| a.name.cmp(&b.name)));
        objs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HallucinationProfile {
    /// Chance an absent object is affirmed when asked about, or added to a caption.
    pub p_assert_absent: f64,
    /// Chance each described attribute of an absent object is borrowed from a real object.
    pub p_borrow: f64,
    pub fabricated_pool: Vec<String>,
    pub rng_seed: u64,
}

impl Default for HallucinationProfile {
    fn default() -> Self {
        Self {
            p_assert_absent: 0.5,
            p_borrow: 0.7,
            fabricated_pool: crate::data::attribute_pools().fabricated.clone(),
            rng_seed: 0,
        }
    }
}

impl HallucinationProfile {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        for (name, p) in [("p_assert_absent", self.p_assert_absent), ("p_borrow", self.p_borrow)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimulatorError::InvalidProfile(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Fabricated phrases must never coincide with a real attribute of the scene.
    pub fn validate_for(&self, scene: &SceneGraph) -> Result<(), SimulatorError> {
        self.validate()?;
        let real: BTreeSet<String> = scene.all_attributes().iter().map(|a| canonical_predicate(a)).collect();
        if let Some(clash) = self.fabricated_pool.iter().find(|f| real.contains(&canonical_predicate(f))) {
            return Err(SimulatorError::InvalidProfile(format!(
                "fabricated attribute `{clash}` also occurs in scene `{}`",
                scene.image_id
            )));
        }
        Ok(())
    }
}

/// RNG keyed by everything that may influence one answer.
fn answer_rng(scene: &SceneGraph, profile: &HallucinationProfile, params: &SamplingParams, tag: &str, subject: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(profile.rng_seed.to_le_bytes());
    h.update(params.seed.unwrap_or(0).to_le_bytes());
    for part in [scene.image_id.as_str(), tag, subject] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn article(noun: &str) -> &'static str {
    match noun.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn sentence_about(name: &str, attribute: &str) -> String {
    format!("The {name} {attribute}.")
}

/// Attributes the simulator claims for an object that is not in the scene.
fn hallucinated_attributes(scene: &SceneGraph, profile: &HallucinationProfile, rng: &mut ChaCha8Rng, object: &str) -> Vec<String> {
    let donors: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.name != object).collect();
    let wanted = rng.gen_range(2..=3);
    let mut chosen: Vec<String> = Vec::new();
    for _ in 0..wanted {
        let borrow = rng.gen_bool(profile.p_borrow);
        let pick = if borrow {
            let fresh: Vec<&String> = donors
                .iter()
                .flat_map(|d| d.attributes.iter())
                .filter(|a| !chosen.contains(a))
                .collect();
            // Uniform donor first, then a uniform unused attribute of that donor.
            let live: Vec<&&SceneObject> = donors
                .iter()
                .filter(|d| d.attributes.iter().any(|a| fresh.contains(&a)))
                .collect();
            live.choose(rng).and_then(|d| {
                let options: Vec<&String> = d.attributes.iter().filter(|a| !chosen.contains(a)).collect();
                options.choose(rng).map(|a| (*a).clone())
            })
        } else {
            let options: Vec<&String> = profile.fabricated_pool.iter().filter(|a| !chosen.contains(a)).collect();
            options.choose(rng).map(|a| (*a).clone())
        };
        if let Some(a) = pick {
            chosen.push(a);
        }
    }
    chosen
}

/// Answer one question about `scene`. Pure in (scene, profile, question, seed).
pub fn answer(scene: &SceneGraph, profile: &HallucinationProfile, question: &str, params: &SamplingParams) -> Result<String, SimulatorError> {
    let parsed = parse_question(question).ok_or_else(|| SimulatorError::UnrecognizedQuestion(question.to_string()))?;
    Ok(match parsed {
        Question::Existence(obj) => {
            let mut rng = answer_rng(scene, profile, params, "exist", &obj);
            if scene.contains(&obj) || rng.gen_bool(profile.p_assert_absent) {
                format!("Yes, there is {} {obj} in the image.", article(&obj))
            } else {
                format!("No, there is no {obj} in the image.")
            }
        }
        Question::Describe(obj) => {
            let attrs: Vec<String> = match scene.object(&obj) {
                Some(o) => o.attributes.clone(),
                None => {
                    let mut rng = answer_rng(scene, profile, params, "describe", &obj);
                    hallucinated_attributes(scene, profile, &mut rng, &obj)
                }
            };
            if attrs.is_empty() {
                format!("I can only see the {obj}, without further details.")
            } else {
                attrs.iter().map(|a| sentence_about(&obj, a)).collect::<Vec<_>>().join(" ")
            }
        }
        Question::Coverage(pred) => {
            let names: Vec<&str> = scene.possessors(&pred).iter().map(|o| o.name.as_str()).collect();
            if names.is_empty() {
                "I cannot find any such object in the image.".to_string()
            } else {
                format!("I can see the following objects: {}.", names.join(", "))
            }
        }
        Question::MostObvious(pred) => match scene.possessors(&pred).first() {
            Some(top) => format!("It is the {}.", top.name),
            None => "I cannot find any such object in the image.".to_string(),
        },
        Question::Caption => {
            let mut rng = answer_rng(scene, profile, params, "caption", "");
            let mut names: Vec<String> = scene.by_salience().iter().map(|o| o.name.clone()).collect();
            if rng.gen_bool(profile.p_assert_absent) {
                let distractors: Vec<&String> = crate::data::vocab().iter().filter(|n| !scene.contains(n)).collect();
                if let Some(d) = distractors.choose(&mut rng) {
                    names.push((*d).clone());
                }
            }
            names
                .iter()
                .map(|n| format!("There is {} {n} in the image.", article(n)))
                .collect::<Vec<_>>()
                .join(" ")
        }
    })
}

/// Yes iff the object a binary existence question asks about is in the scene.
pub fn ground_truth(scene: &SceneGraph, question: &str) -> Result<Label, SimulatorError> {
    let obj = parse_existence_question(question).ok_or_else(|| SimulatorError::UnrecognizedQuestion(question.to_string()))?;
    Ok(if scene.contains(&obj) { Label::Yes } else { Label::No })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SceneFile {
    One(SceneGraph),
    Many(Vec<SceneGraph>),
}

/// Load a scene file holding either one scene object or an array of scenes.
pub fn load_scenes(path: &Path) -> Result<Vec<SceneGraph>, SimulatorError> {
    let load_err = |reason: String| SimulatorError::Load { path: path.display().to_string(), reason };
    let raw = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    let scenes = match serde_json::from_str::<SceneFile>(&raw).map_err(|e| load_err(e.to_string()))? {
        SceneFile::One(s) => vec![s],
        SceneFile::Many(v) => v,
    };
    scenes.into_iter().map(|s| SceneGraph::new(s.image_id, s.objects)).collect()
}

pub fn save_scenes(path: &Path, scenes: &[SceneGraph]) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(scenes).expect("scenes serialize");
    std::fs::write(path, json + "\n")
}
