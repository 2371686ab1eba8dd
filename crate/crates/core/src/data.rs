//! Bundled data: the object vocabulary, the co-occurrence table and the
//! attribute pools used by the simulator.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::lexicon::normalize_name;

const VOCAB_JSON: &str = include_str!("../data/vocab.json");
const COOCCURRENCE_JSON: &str = include_str!("../data/cooccurrence.json");
const ATTRIBUTES_JSON: &str = include_str!("../data/attributes.json");

/// Noun -> nouns that commonly appear alongside it.
pub type Cooccurrence = BTreeMap<String, Vec<String>>;

#[derive(Debug, Deserialize)]
pub struct AttributePools {
    /// Phrases real scene objects are given.
    pub scene: Vec<String>,
    /// Phrases no scene object ever has.
    pub fabricated: Vec<String>,
}

/// The 80-noun household and street vocabulary, normalized.
pub fn vocab() -> &'static [String] {
    static VOCAB: OnceLock<Vec<String>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let raw: Vec<String> = serde_json::from_str(VOCAB_JSON).expect("bundled vocab.json");
        raw.iter().map(|n| normalize_name(n)).collect()
    })
}

pub fn cooccurrence() -> &'static Cooccurrence {
    static TABLE: OnceLock<Cooccurrence> = OnceLock::new();
    TABLE.get_or_init(|| {
        let raw: Cooccurrence = serde_json::from_str(COOCCURRENCE_JSON).expect("bundled cooccurrence.json");
        normalize_cooccurrence(raw)
    })
}

pub fn normalize_cooccurrence(raw: Cooccurrence) -> Cooccurrence {
    raw.into_iter()
        .map(|(k, vs)| (normalize_name(&k), vs.iter().map(|v| normalize_name(v)).collect()))
        .collect()
}

pub fn attribute_pools() -> &'static AttributePools {
    static POOLS: OnceLock<AttributePools> = OnceLock::new();
    POOLS.get_or_init(|| serde_json::from_str(ATTRIBUTES_JSON).expect("bundled attributes.json"))
}
