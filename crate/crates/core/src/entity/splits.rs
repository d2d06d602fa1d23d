use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::{AttributeTable, EntityClass};
use super::{DataError, Result};

/// Per-attribute training entities and per-class inter-attribute evaluation
/// entities, with the recorded overlap between them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: BTreeMap<String, Vec<String>>,
    pub inter_eval: BTreeMap<EntityClass, Vec<String>>,
    /// `|train(attribute) ∩ inter_eval|` per attribute; zero by construction.
    pub overlap: BTreeMap<String, usize>,
}

impl SplitSpec {
    pub fn train_entities(&self) -> BTreeSet<&str> {
        self.train.values().flatten().map(String::as_str).collect()
    }

    fn record_overlap(&mut self) {
        let eval: BTreeSet<&String> = self.inter_eval.values().flatten().collect();
        self.overlap = self
            .train
            .iter()
            .map(|(attr, ids)| (attr.clone(), ids.iter().filter(|id| eval.contains(id)).count()))
            .collect();
    }
}

/// Uniform seeded sample of up to `size` entities per attribute.
pub fn sample_train_splits(table: &AttributeTable, attributes: &[&str], size: usize, seed: u64) -> SplitSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeMap::new();
    for attr in attributes {
        let mut ids: Vec<String> = table.entities_with(attr).into_iter().map(String::from).collect();
        ids.shuffle(&mut rng);
        ids.truncate(size);
        train.insert(attr.to_string(), ids);
    }
    let mut spec = SplitSpec { seed, train, ..Default::default() };
    spec.record_overlap();
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterEvalConfig {
    pub classes: Vec<EntityClass>,
    /// Maximum evaluation rows per class; absent means uncapped.
    pub caps: BTreeMap<EntityClass, usize>,
    pub min_entities: usize,
    pub seed: u64,
}

impl InterEvalConfig {
    /// Caps reproducing the reference set sizes: 402 human, 777 geographical rows.
    pub fn reference_sizes(seed: u64) -> Self {
        InterEvalConfig {
            classes: vec![EntityClass::Human, EntityClass::Geographical],
            caps: BTreeMap::from([(EntityClass::Human, 402), (EntityClass::Geographical, 777)]),
            min_entities: 3,
            seed,
        }
    }

    pub fn uncapped(classes: Vec<EntityClass>, seed: u64) -> Self {
        InterEvalConfig { classes, caps: BTreeMap::new(), min_entities: 3, seed }
    }
}

/// Entities holding every attribute of their class and absent from all
/// training splits, shuffled with the config seed and capped per class.
pub fn build_inter_eval_set(table: &AttributeTable, train: &SplitSpec, config: &InterEvalConfig) -> Result<SplitSpec> {
    let excluded = train.train_entities();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = SplitSpec { seed: train.seed, train: train.train.clone(), ..Default::default() };
    for &class in &config.classes {
        let attrs = class.attributes();
        let mut ids: Vec<String> = table
            .entities()
            .filter(|e| !attrs.is_empty() && table.is_complete(e, attrs) && !excluded.contains(e))
            .map(String::from)
            .collect();
        if ids.len() < config.min_entities.max(1) {
            return Err(DataError::InsufficientEntities {
                what: format!("{class:?} inter-attribute set"),
                found: ids.len(),
                need: config.min_entities.max(1),
            });
        }
        ids.shuffle(&mut rng);
        if let Some(&cap) = config.caps.get(&class) {
            ids.truncate(cap);
        }
        ids.sort();
        out.inter_eval.insert(class, ids);
    }
    out.record_overlap();
    Ok(out)
}
