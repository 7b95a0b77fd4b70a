//! Component ablation over the synthetic world: five configurations, each
//! trained and evaluated on the same entity-disjoint split for every seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::config::{KnowledgeMode, TrainConfig};
use crate::encoders::Example;
use crate::error::{Error, Result};
use crate::kg::build_graph;
use crate::rng::mix_seed;
use crate::synth::{gen_dataset, gen_world, split_by_entity, Split, World, WorldSpec};
use crate::trainer::Trainer;

pub const ROW_NAMES: [&str; 5] = ["baseline", "+encoder", "+retrieval", "+alignment", "full"];

/// Everything the five rows share.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub world: World,
    pub examples: Vec<Example>,
    pub split: Split,
    /// Label-free alignment corpus for the pretraining stage.
    pub pretrain: Vec<Example>,
}

impl AblationData {
    pub fn train(&self) -> Vec<Example> {
        self.split.train.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn test(&self) -> Vec<Example> {
        self.split.test.iter().map(|&i| self.examples[i].clone()).collect()
    }
}

/// Generates the default world for `cfg` and its data.
pub fn prepare(cfg: &TrainConfig) -> Result<AblationData> {
    cfg.validate()?;
    cfg.validate_world()?;
    let spec = WorldSpec::balanced(&cfg.world, cfg.d_i, cfg.vocab_size, cfg.seed)?;
    let world = gen_world(&spec, cfg.seed)?;
    prepare_from_world(world, cfg)
}

pub fn prepare_from_world(world: World, cfg: &TrainConfig) -> Result<AblationData> {
    if world.spec.n_attributes != cfg.n_classes {
        return Err(Error::Config {
            key: "n_classes".into(),
            message: format!("world has {} attributes, config says {}", world.spec.n_attributes, cfg.n_classes),
        });
    }
    let a = &cfg.ablation;
    let examples = gen_dataset(&world, a.n_examples, mix_seed(cfg.seed, 100))?;
    let split = split_by_entity(&world, &examples, a.test_fraction, mix_seed(cfg.seed, 101))?;
    let pretrain = gen_dataset(&world, a.n_pretrain_examples.max(1), mix_seed(cfg.seed, 102))?;
    Ok(AblationData { world, examples, split, pretrain })
}

/// Training config of row `row` for `seed`, and whether it pretrains.
pub fn row_config(base: &TrainConfig, row: usize, seed: u64) -> (TrainConfig, bool) {
    let mut cfg = TrainConfig { seed, use_gate: false, freeze: Vec::new(), ..base.clone() };
    let no_align = |c: &mut TrainConfig| {
        c.lambda1 = 0.0;
        if c.lambda2 == 0.0 {
            c.lambda2 = 1.0;
        }
    };
    let pretrain = match row {
        0 => {
            cfg.knowledge = KnowledgeMode::None;
            no_align(&mut cfg);
            false
        }
        1 => {
            cfg.knowledge = KnowledgeMode::MeanPool;
            no_align(&mut cfg);
            false
        }
        2 => {
            cfg.knowledge = KnowledgeMode::Retrieve;
            no_align(&mut cfg);
            false
        }
        3 => {
            cfg.knowledge = KnowledgeMode::Retrieve;
            true
        }
        _ => {
            cfg.knowledge = KnowledgeMode::Retrieve;
            cfg.use_gate = true;
            cfg.freeze = base.freeze.clone();
            true
        }
    };
    (cfg, pretrain)
}

/// Trains one (row, seed) cell and returns its test accuracy.
pub fn run_cell(data: &AblationData, base: &TrainConfig, row: usize, seed: u64) -> Result<f64> {
    let (cfg, pretrain) = row_config(base, row, seed);
    let graph = build_graph(&data.world.triples, cfg.d_k, mix_seed(seed, 7))?;
    let mut trainer = Trainer::new(cfg, graph)?;
    let train = data.train();
    trainer.fit(pretrain.then_some(&data.pretrain[..]), &train, None)?;
    Ok(trainer.evaluate(&data.test())?.accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// `mean - baseline mean`.
    pub delta: f64,
}

/// Runs every cell, at most `threads` at a time. Results do not depend on
/// the thread count.
pub fn run_ablation(data: &AblationData, cfg: &TrainConfig, seeds: &[u64], threads: usize) -> Result<Vec<AblationRow>> {
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() < 3 || distinct.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!("need at least 3 distinct seeds, got {seeds:?}")));
    }
    let train: BTreeSet<usize> = data.split.train.iter().copied().collect();
    if data.split.test.iter().any(|i| train.contains(i)) {
        return Err(Error::InvalidArgument("train and test splits overlap".into()));
    }
    if data.split.test.is_empty() || data.split.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cells: Vec<(usize, u64)> = (0..ROW_NAMES.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(row, seed)) = cells.get(i) else { break };
                let r = run_cell(data, cfg, row, seed);
                results.lock().expect("no poisoned cells")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned cells");
    let mut accs = Vec::with_capacity(cells.len());
    for r in results {
        accs.push(r.expect("every cell ran")?);
    }
    let mut rows: Vec<AblationRow> = ROW_NAMES
        .iter()
        .enumerate()
        .map(|(r, name)| {
            let per_seed: Vec<(u64, f64)> = seeds.iter().enumerate().map(|(j, &s)| (s, accs[r * seeds.len() + j])).collect();
            let mean = per_seed.iter().map(|p| p.1).sum::<f64>() / seeds.len() as f64;
            AblationRow { name: (*name).to_string(), per_seed, mean, delta: 0.0 }
        })
        .collect();
    let base = rows[0].mean;
    for row in &mut rows {
        row.delta = row.mean - base;
    }
    Ok(rows)
}

/// Non-decreasing means, except for at most `max_inversions` adjacent drops
/// each no larger than `slack`.
pub fn is_monotone(means: &[f64], max_inversions: usize, slack: f64) -> bool {
    let mut inversions = 0;
    for w in means.windows(2) {
        if w[1] < w[0] {
            if w[0] - w[1] > slack {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= max_inversions
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,seed,accuracy\n");
    for row in rows {
        for (seed, acc) in &row.per_seed {
            writeln!(s, "{},{},{}", row.name, seed, acc).expect("write to string");
        }
    }
    s
}

pub fn to_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| config | mean accuracy | delta vs baseline | per seed |\n|---|---|---|---|\n");
    for row in rows {
        let per: Vec<String> = row.per_seed.iter().map(|(seed, a)| format!("{seed}: {a:.4}")).collect();
        writeln!(s, "| {} | {:.4} | {:+.4} | {} |", row.name, row.mean, row.delta, per.join(", ")).expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_rule() {
        assert!(is_monotone(&[0.2, 0.3, 0.3, 0.5], 1, 0.01));
        assert!(is_monotone(&[0.25, 0.245, 0.3, 0.5], 1, 0.01));
        assert!(!is_monotone(&[0.25, 0.245, 0.3, 0.295], 1, 0.01));
        assert!(!is_monotone(&[0.25, 0.2, 0.3], 1, 0.01));
    }

    #[test]
    fn row_definitions() {
        let base = TrainConfig::default();
        let names: Vec<(KnowledgeMode, bool, bool)> = (0..5)
            .map(|r| {
                let (c, p) = row_config(&base, r, 9);
                assert_eq!(c.seed, 9);
                (c.knowledge, c.use_gate, p)
            })
            .collect();
        assert_eq!(
            names,
            vec![
                (KnowledgeMode::None, false, false),
                (KnowledgeMode::MeanPool, false, false),
                (KnowledgeMode::Retrieve, false, false),
                (KnowledgeMode::Retrieve, false, true),
                (KnowledgeMode::Retrieve, true, true),
            ]
        );
        assert_eq!(row_config(&base, 4, 0).0.freeze, base.freeze);
        assert!(row_config(&base, 3, 0).0.freeze.is_empty());
        assert_eq!(row_config(&base, 0, 0).0.lambda1, 0.0);
    }

    #[test]
    fn report_formats() {
        let rows = vec![
            AblationRow { name: "baseline".into(), per_seed: vec![(1, 0.25), (2, 0.5)], mean: 0.375, delta: 0.0 },
            AblationRow { name: "full".into(), per_seed: vec![(1, 0.75), (2, 1.0)], mean: 0.875, delta: 0.5 },
        ];
        assert_eq!(to_csv(&rows), "config,seed,accuracy\nbaseline,1,0.25\nbaseline,2,0.5\nfull,1,0.75\nfull,2,1\n");
        let md = to_markdown(&rows);
        assert!(md.contains("| full | 0.8750 | +0.5000 |"));
    }

    #[test]
    fn seed_count_enforced() {
        let cfg = TrainConfig { ablation: crate::config::AblationConfig { n_examples: 50, n_pretrain_examples: 10, ..Default::default() }, ..Default::default() };
        let data = prepare(&cfg).unwrap();
        assert!(run_ablation(&data, &cfg, &[1, 2], 1).is_err());
        assert!(run_ablation(&data, &cfg, &[1, 1, 2], 1).is_err());
        let mut bad = data.clone();
        bad.split.test.push(bad.split.train[0]);
        assert!(run_ablation(&bad, &cfg, &[1, 2, 3], 1).is_err());
    }
}
