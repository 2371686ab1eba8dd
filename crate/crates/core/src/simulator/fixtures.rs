use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{article, SceneGraph, SceneObject, SimulatorError};
use crate::data::Cooccurrence;
use crate::eval::{EvalRecord, Label, Setting};

#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub n_scenes: usize,
    pub objects_per_scene: usize,
    pub questions_per_image: usize,
    pub vocab: Vec<String>,
    pub cooccurrence: Cooccurrence,
    pub attribute_pool: Vec<String>,
    pub settings: Vec<Setting>,
    pub seed: u64,
}

impl FixtureConfig {
    /// Bundled vocabulary, co-occurrence table and attribute pool.
    pub fn standard(n_scenes: usize, objects_per_scene: usize, questions_per_image: usize, seed: u64) -> Self {
        Self {
            n_scenes,
            objects_per_scene,
            questions_per_image,
            vocab: crate::data::vocab().to_vec(),
            cooccurrence: crate::data::cooccurrence().clone(),
            attribute_pool: crate::data::attribute_pools().scene.clone(),
            settings: vec![Setting::Random],
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub scenes: Vec<SceneGraph>,
    pub records: Vec<EvalRecord>,
}

impl FixtureSet {
    pub fn scene(&self, image_id: &str) -> Option<&SceneGraph> {
        self.scenes.iter().find(|s| s.image_id == image_id)
    }
}

fn existence_question(noun: &str) -> String {
    format!("Is there {} {noun} in the image?", article(noun))
}

/// Draw `k` distinct items with probability proportional to `weights`.
fn weighted_sample(rng: &mut ChaCha8Rng, items: &[String], weights: &[f64], k: usize) -> Vec<String> {
    let mut pool: Vec<(String, f64)> = items.iter().cloned().zip(weights.iter().copied()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut x = rng.gen_range(0.0..total);
        let idx = pool
            .iter()
            .position(|(_, w)| {
                if x < *w {
                    true
                } else {
                    x -= w;
                    false
                }
            })
            .unwrap_or(pool.len() - 1);
        out.push(pool.remove(idx).0);
    }
    out
}

/// Scenes plus balanced yes/no existence records, one block per requested setting.
///
/// Positives ask about objects in the scene. Negatives are absent nouns drawn
/// uniformly (random), by global frequency across the generated scenes
/// (popular), or from the co-occurrence rows of the scene's objects
/// (adversarial).
pub fn generate_fixtures(cfg: &FixtureConfig) -> Result<FixtureSet, SimulatorError> {
    let bad = |m: &str| Err(SimulatorError::InvalidFixtureRequest(m.to_string()));
    if cfg.objects_per_scene < 2 {
        return bad("objects_per_scene must be at least 2");
    }
    if cfg.questions_per_image == 0 || !cfg.questions_per_image.is_multiple_of(2) {
        return bad("questions_per_image must be a positive even number");
    }
    let half = cfg.questions_per_image / 2;
    if half > cfg.objects_per_scene {
        return bad("questions_per_image / 2 exceeds objects_per_scene");
    }
    if cfg.attribute_pool.len() < 4 {
        return bad("attribute pool needs at least 4 phrases");
    }
    let vocab: Vec<String> = {
        let mut seen = BTreeSet::new();
        cfg.vocab.iter().filter(|v| seen.insert((*v).clone())).cloned().collect()
    };
    let needed = cfg.objects_per_scene + half;
    if vocab.len() < needed {
        return Err(SimulatorError::VocabTooSmall { needed, have: vocab.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // A seeded popularity ranking: earlier nouns in the shuffled order are drawn more often.
    let mut ranked = vocab.clone();
    ranked.shuffle(&mut rng);
    let weights: Vec<f64> = (0..ranked.len()).map(|r| 1.0 / ((r + 1) as f64).sqrt()).collect();

    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let names = weighted_sample(&mut rng, &ranked, &weights, cfg.objects_per_scene);
        let objects = names
            .into_iter()
            .map(|name| {
                let n_attrs = rng.gen_range(2..=4);
                let attributes: Vec<String> = cfg.attribute_pool.choose_multiple(&mut rng, n_attrs).cloned().collect();
                let salience = f64::from(rng.gen_range(1..=100u32)) / 100.0;
                SceneObject { name, attributes, salience }
            })
            .collect();
        scenes.push(SceneGraph::new(format!("sim-{:04}", i), objects)?);
    }

    let mut frequency: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &scenes {
        for o in &s.objects {
            *frequency.entry(o.name.as_str()).or_default() += 1;
        }
    }
    let vocab_pos: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let mut popular_order: Vec<&String> = vocab.iter().collect();
    popular_order.sort_by_key(|v| (std::cmp::Reverse(frequency.get(v.as_str()).copied().unwrap_or(0)), vocab_pos[v.as_str()]));

    let mut records = Vec::new();
    for &setting in &cfg.settings {
        for scene in &scenes {
            let present: BTreeSet<&str> = scene.objects.iter().map(|o| o.name.as_str()).collect();
            let absent: Vec<&String> = vocab.iter().filter(|v| !present.contains(v.as_str())).collect();
            let positives: Vec<&SceneObject> = scene.objects.choose_multiple(&mut rng, half).collect();
            let negatives: Vec<String> = match setting {
                Setting::Random | Setting::Existence => {
                    absent.choose_multiple(&mut rng, half).map(|s| (*s).clone()).collect()
                }
                Setting::Popular => popular_order
                    .iter()
                    .filter(|v| !present.contains(v.as_str()))
                    .take(half)
                    .map(|s| (*s).clone())
                    .collect(),
                Setting::Adversarial => {
                    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
                    for p in &present {
                        for c in cfg.cooccurrence.get(*p).into_iter().flatten() {
                            if !present.contains(c.as_str()) {
                                *votes.entry(c.as_str()).or_default() += 1;
                            }
                        }
                    }
                    if votes.len() < half {
                        return Err(SimulatorError::InsufficientCooccurrence {
                            image_id: scene.image_id.clone(),
                            needed: half,
                            have: votes.len(),
                        });
                    }
                    let mut ranked: Vec<(&str, usize)> = votes.into_iter().collect();
                    ranked.sort_by_key(|(n, v)| {
                        (std::cmp::Reverse(*v), std::cmp::Reverse(frequency.get(n).copied().unwrap_or(0)), *n)
                    });
                    ranked.into_iter().take(half).map(|(n, _)| n.to_string()).collect()
                }
            };
            let mut block: Vec<EvalRecord> = positives
                .iter()
                .map(|o| (o.name.clone(), Label::Yes))
                .chain(negatives.into_iter().map(|n| (n, Label::No)))
                .map(|(noun, label)| EvalRecord {
                    image_id: scene.image_id.clone(),
                    question: existence_question(&noun),
                    label,
                    setting,
                })
                .collect();
            block.shuffle(&mut rng);
            records.extend(block);
        }
    }
    Ok(FixtureSet { scenes, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(settings: Vec<Setting>) -> FixtureConfig {
        FixtureConfig { settings, ..FixtureConfig::standard(50, 5, 6, 7) }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_fixtures(&cfg(vec![Setting::Random])).unwrap();
        let b = generate_fixtures(&cfg(vec![Setting::Random])).unwrap();
        assert_eq!(a, b);
        let ja = serde_json::to_string(&a.records).unwrap();
        let jb = serde_json::to_string(&b.records).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn balanced_three_hundred() {
        let f = generate_fixtures(&cfg(vec![Setting::Random])).unwrap();
        assert_eq!(f.records.len(), 300);
        assert_eq!(f.records.iter().filter(|r| r.label == Label::Yes).count(), 150);
    }

    #[test]
    fn labels_match_scene_ground_truth() {
        let f = generate_fixtures(&cfg(vec![Setting::Random, Setting::Popular, Setting::Adversarial])).unwrap();
        assert_eq!(f.records.len(), 900);
        for r in &f.records {
            let scene = f.scene(&r.image_id).unwrap();
            assert_eq!(super::super::ground_truth(scene, &r.question).unwrap(), r.label);
        }
    }

    #[test]
    fn adversarial_negatives_cooccur_with_a_present_object() {
        let c = cfg(vec![Setting::Adversarial]);
        let f = generate_fixtures(&c).unwrap();
        for r in f.records.iter().filter(|r| r.label == Label::No) {
            let noun = super::super::parse_existence_question(&r.question).unwrap();
            let scene = f.scene(&r.image_id).unwrap();
            let hit = scene
                .objects
                .iter()
                .any(|o| c.cooccurrence.get(&o.name).is_some_and(|row| row.contains(&noun)));
            assert!(hit, "{noun} in {}", r.image_id);
        }
    }

    #[test]
    fn vocab_too_small() {
        let mut c = cfg(vec![Setting::Random]);
        c.vocab.truncate(6);
        assert!(matches!(generate_fixtures(&c), Err(SimulatorError::VocabTooSmall { needed: 8, have: 6 })));
    }

    #[test]
    fn scenes_have_unique_objects_and_valid_attributes() {
        let f = generate_fixtures(&cfg(vec![Setting::Random])).unwrap();
        for s in &f.scenes {
            s.validate().unwrap();
            assert_eq!(s.objects.len(), 5);
        }
    }
}
