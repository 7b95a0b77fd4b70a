//! Synthetic knowledge-required classification worlds.
//!
//! Each entity has a random prototype image and a name token; its class is an
//! attribute stated only in the knowledge graph, assigned independently of the
//! prototype. A model that has never aligned an entity with its graph node can
//! therefore do no better than chance on that entity.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::Example;
use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::rng::{mix_seed, Xoshiro256};

pub const HAS_ATTRIBUTE: &str = "has_attribute";
pub const RELATED_TO: &str = "related_to";

/// Question words; entity name tokens follow them in the vocabulary.
pub const TEMPLATE_WORDS: [&str; 12] =
    ["what", "is", "the", "attribute", "of", "which", "property", "does", "have", "tell", "me", "about"];

/// Word indices per template; `None` marks the entity slot.
const TEMPLATES: [&[Option<usize>]; 3] = [
    &[Some(0), Some(1), Some(2), Some(3), Some(4), None],
    &[Some(5), Some(6), Some(7), None, Some(8)],
    &[Some(9), Some(10), Some(11), None],
];

/// World shape knobs that live in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub noise: f64,
    pub n_distractors: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { n_entities: 20, n_attributes: 4, noise: 3.0, n_distractors: 5 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| Error::Config { key: format!("world.{key}"), message };
        if self.n_attributes < 2 {
            return Err(err("n_attributes", format!("must be >= 2, got {}", self.n_attributes)));
        }
        if self.n_entities < self.n_attributes {
            return Err(err("n_entities", format!("must be >= n_attributes ({})", self.n_attributes)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(err("noise", format!("must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Full description of a world before sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub n_entities: usize,
    pub n_attributes: usize,
    pub d_i: usize,
    pub vocab_size: usize,
    pub noise: f64,
    pub n_distractors: usize,
    /// `assignment[e]` is entity `e`'s attribute.
    pub assignment: Vec<usize>,
}

impl WorldSpec {
    /// Balanced assignment: attribute counts differ by at most one.
    pub fn balanced(cfg: &WorldConfig, d_i: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut assignment: Vec<usize> = (0..cfg.n_entities).map(|e| e % cfg.n_attributes).collect();
        assignment.shuffle(&mut Xoshiro256::seed_from(mix_seed(seed, 0xA551)));
        let spec = Self {
            n_entities: cfg.n_entities,
            n_attributes: cfg.n_attributes,
            d_i,
            vocab_size,
            noise: cfg.noise,
            n_distractors: cfg.n_distractors,
            assignment,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_attributes < 2 || self.n_entities < self.n_attributes {
            return bad(format!("need n_entities >= n_attributes >= 2, got {} and {}", self.n_entities, self.n_attributes));
        }
        if self.assignment.len() != self.n_entities {
            return bad("assignment must cover every entity".into());
        }
        if self.assignment.iter().any(|&a| a >= self.n_attributes) {
            return bad("assignment refers to an unknown attribute".into());
        }
        let used: BTreeSet<usize> = self.assignment.iter().copied().collect();
        if used.len() != self.n_attributes {
            return bad("every attribute must be used at least once".into());
        }
        if self.d_i == 0 {
            return bad("d_i must be >= 1".into());
        }
        if self.vocab_size < TEMPLATE_WORDS.len() + self.n_entities {
            return bad(format!(
                "vocab_size {} cannot hold {} template words and {} entity names",
                self.vocab_size,
                TEMPLATE_WORDS.len(),
                self.n_entities
            ));
        }
        if self.n_distractors > 0 && self.n_entities < 2 {
            return bad("distractors need at least two entities".into());
        }
        Ok(())
    }
}

pub fn entity_id(e: usize) -> String {
    format!("entity_{e}")
}

pub fn attribute_id(a: usize) -> String {
    format!("attr_{a}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub triples: Vec<Triple>,
    /// Unit-norm prototype image per entity.
    pub prototypes: Vec<Vec<f64>>,
    /// Node id of each entity, in entity order.
    pub entity_nodes: Vec<String>,
}

fn unit_vector(rng: &mut Xoshiro256, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn gen_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let mut rng = Xoshiro256::seed_from(mix_seed(seed, 0x3041));
    let mut triples: Vec<Triple> = spec
        .assignment
        .iter()
        .enumerate()
        .map(|(e, &a)| Triple::new(entity_id(e), HAS_ATTRIBUTE, attribute_id(a)))
        .collect();
    for _ in 0..spec.n_distractors {
        let a = rng.random_range(0..spec.n_entities);
        let mut b = rng.random_range(0..spec.n_entities - 1);
        if b >= a {
            b += 1;
        }
        triples.push(Triple::new(entity_id(a), RELATED_TO, entity_id(b)));
    }
    let prototypes = (0..spec.n_entities).map(|_| unit_vector(&mut rng, spec.d_i)).collect();
    Ok(World { spec: spec.clone(), triples, prototypes, entity_nodes: (0..spec.n_entities).map(entity_id).collect() })
}

impl World {
    /// Rebuilds a world from `head has_attribute tail` triples. Entities and
    /// attributes are numbered in order of first appearance; prototypes are
    /// drawn fresh.
    pub fn from_triples(triples: &[Triple], d_i: usize, vocab_size: usize, noise: f64, seed: u64) -> Result<World> {
        let mut entities: Vec<String> = Vec::new();
        let mut attr_index: BTreeMap<String, usize> = BTreeMap::new();
        let mut assignment = Vec::new();
        for t in triples.iter().filter(|t| t.relation == HAS_ATTRIBUTE) {
            if entities.contains(&t.head) {
                return Err(Error::InvalidArgument(format!("entity `{}` has more than one attribute", t.head)));
            }
            let next = attr_index.len();
            let a = *attr_index.entry(t.tail.clone()).or_insert(next);
            entities.push(t.head.clone());
            assignment.push(a);
        }
        let spec = WorldSpec {
            n_entities: entities.len(),
            n_attributes: attr_index.len(),
            d_i,
            vocab_size,
            noise,
            n_distractors: 0,
            assignment,
        };
        spec.validate()?;
        let mut rng = Xoshiro256::seed_from(mix_seed(seed, 0x3041));
        let prototypes = (0..spec.n_entities).map(|_| unit_vector(&mut rng, d_i)).collect();
        Ok(World { spec, triples: triples.to_vec(), prototypes, entity_nodes: entities })
    }

    pub fn entity_of(&self, node: &str) -> Option<usize> {
        self.entity_nodes.iter().position(|n| n == node)
    }

    pub fn entity_token(&self, e: usize) -> usize {
        TEMPLATE_WORDS.len() + e
    }

    /// One example about entity `e`.
    pub fn sample_example(&self, e: usize, rng: &mut Xoshiro256) -> Example {
        let noise = Normal::new(0.0, self.spec.noise).expect("validated noise");
        let image_features = self.prototypes[e]
            .iter()
            .map(|&p| if self.spec.noise > 0.0 { p + noise.sample(rng) } else { p })
            .collect();
        let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let token_ids = template.iter().map(|w| w.unwrap_or_else(|| self.entity_token(e))).collect();
        Example { image_features, token_ids, label: self.spec.assignment[e], gold_node: Some(self.entity_nodes[e].clone()) }
    }
}

/// `n_examples` examples. Entities are drawn in shuffled rounds, each round
/// visiting every entity once, so per-entity counts differ by at most one.
pub fn gen_dataset(world: &World, n_examples: usize, seed: u64) -> Result<Vec<Example>> {
    if n_examples == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = Xoshiro256::seed_from(mix_seed(seed, 0xDA7A));
    let n = world.spec.n_entities;
    let mut out = Vec::with_capacity(n_examples);
    let mut round: Vec<usize> = (0..n).collect();
    while out.len() < n_examples {
        round.shuffle(&mut rng);
        for &e in round.iter().take(n_examples - out.len()) {
            out.push(world.sample_example(e, &mut rng));
        }
    }
    Ok(out)
}

/// Control dataset: labels permuted across examples.
pub fn shuffle_labels(examples: &[Example], seed: u64) -> Vec<Example> {
    let mut labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    labels.shuffle(&mut Xoshiro256::seed_from(mix_seed(seed, 0x5F1E)));
    examples.iter().zip(labels).map(|(e, label)| Example { label, ..e.clone() }).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_entities: Vec<usize>,
}

/// Holds out whole entities: `round(n_entities * test_fraction)` of them,
/// taken one attribute at a time so every class appears in the test set when
/// possible. Examples without a known entity go to training.
pub fn split_by_entity(world: &World, examples: &[Example], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let n = world.spec.n_entities;
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = Xoshiro256::seed_from(mix_seed(seed, 0x5711));
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); world.spec.n_attributes];
    for (e, &a) in world.spec.assignment.iter().enumerate() {
        pools[a].push(e);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let mut test_entities = Vec::with_capacity(n_test);
    let mut a = 0;
    while test_entities.len() < n_test {
        if let Some(e) = pools[a].pop() {
            test_entities.push(e);
        }
        a = (a + 1) % pools.len();
    }
    test_entities.sort_unstable();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, ex) in examples.iter().enumerate() {
        let e = ex.gold_node.as_deref().and_then(|g| world.entity_of(g));
        match e {
            Some(e) if test_entities.binary_search(&e).is_ok() => test.push(i),
            _ => train.push(i),
        }
    }
    Ok(Split { train, test, test_entities })
}

/// Fraction of exact matches.
pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(n_entities: usize, n_attributes: usize, noise: f64) -> World {
        let cfg = WorldConfig { n_entities, n_attributes, noise, n_distractors: 3 };
        let spec = WorldSpec::balanced(&cfg, 8, 12 + n_entities, 5).unwrap();
        gen_world(&spec, 5).unwrap()
    }

    #[test]
    fn two_entity_world_counts() {
        let w = world(2, 2, 0.1);
        let attr = w.triples.iter().filter(|t| t.relation == HAS_ATTRIBUTE).count();
        assert_eq!(attr, 2);
        assert_eq!(w.triples.len(), 2 + 3);
        assert!(w.triples[2..].iter().all(|t| t.relation == RELATED_TO && t.head != t.tail));
    }

    #[test]
    fn prototypes_unit_norm_and_deterministic() {
        let w = world(20, 4, 0.1);
        for p in &w.prototypes {
            let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(w, world(20, 4, 0.1));
    }

    #[test]
    fn balanced_assignment_uses_every_attribute() {
        let w = world(20, 4, 0.1);
        for a in 0..4 {
            assert_eq!(w.spec.assignment.iter().filter(|&&x| x == a).count(), 5);
        }
    }

    #[test]
    fn zero_noise_gives_prototype() {
        let w = world(5, 2, 0.0);
        for ex in gen_dataset(&w, 20, 1).unwrap() {
            let e = w.entity_of(ex.gold_node.as_deref().unwrap()).unwrap();
            assert_eq!(ex.image_features, w.prototypes[e]);
            assert!(ex.token_ids.contains(&w.entity_token(e)));
            assert_eq!(ex.label, w.spec.assignment[e]);
        }
    }

    #[test]
    fn label_frequencies_follow_assignment() {
        let w = world(20, 4, 0.1);
        let data = gen_dataset(&w, 4000, 2).unwrap();
        for a in 0..4 {
            let f = data.iter().filter(|e| e.label == a).count() as f64 / 4000.0;
            // balanced map: 5 of 20 entities per attribute; 4 sigma ~ 0.027
            assert!((f - 0.25).abs() < 0.03, "attribute {a}: {f}");
        }
    }

    #[test]
    fn spec_validation() {
        let cfg = WorldConfig { n_entities: 3, n_attributes: 4, ..Default::default() };
        assert!(WorldSpec::balanced(&cfg, 4, 40, 0).is_err());
        let cfg = WorldConfig::default();
        assert!(WorldSpec::balanced(&cfg, 4, 20, 0).is_err());
        let mut spec = WorldSpec::balanced(&cfg, 4, 32, 0).unwrap();
        spec.assignment[0] = 9;
        assert!(gen_world(&spec, 0).is_err());
    }

    #[test]
    fn entity_split_is_disjoint_and_stratified() {
        let w = world(20, 4, 0.1);
        let data = gen_dataset(&w, 500, 3).unwrap();
        let s = split_by_entity(&w, &data, 0.2, 9).unwrap();
        assert_eq!(s.test_entities.len(), 4);
        let classes: BTreeSet<usize> = s.test_entities.iter().map(|&e| w.spec.assignment[e]).collect();
        assert_eq!(classes.len(), 4);
        let train: BTreeSet<usize> = s.train.iter().copied().collect();
        assert!(s.test.iter().all(|i| !train.contains(i)));
        assert_eq!(s.train.len() + s.test.len(), data.len());
        for &i in &s.train {
            let e = w.entity_of(data[i].gold_node.as_deref().unwrap()).unwrap();
            assert!(!s.test_entities.contains(&e));
        }
    }

    #[test]
    fn shuffle_keeps_label_multiset() {
        let w = world(20, 4, 0.1);
        let data = gen_dataset(&w, 200, 3).unwrap();
        let shuffled = shuffle_labels(&data, 1);
        let mut a: Vec<usize> = data.iter().map(|e| e.label).collect();
        let mut b: Vec<usize> = shuffled.iter().map(|e| e.label).collect();
        assert_ne!(a, b);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn from_triples_recovers_assignment() {
        let w = world(8, 3, 0.1);
        let back = World::from_triples(&w.triples, 8, 20, 0.1, 5).unwrap();
        assert_eq!(back.spec.n_entities, 8);
        assert_eq!(back.spec.n_attributes, 3);
        for e in 0..8 {
            let orig = w.spec.assignment[e];
            let same_class: Vec<usize> = (0..8).filter(|&o| w.spec.assignment[o] == orig).collect();
            let same_back: Vec<usize> = (0..8).filter(|&o| back.spec.assignment[o] == back.spec.assignment[e]).collect();
            assert_eq!(same_class, same_back);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(evaluate_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(evaluate_accuracy(&[1, 0, 1, 0], &[1, 1, 1, 1]).unwrap(), 0.5);
        assert!(evaluate_accuracy(&[1], &[1, 2]).is_err());
        assert!(evaluate_accuracy(&[], &[]).is_err());
    }
}
