//! Two-stage training: contrastive pretraining, then task fine-tuning under a
//! freeze policy. Runs are single-threaded and fully determined by the seed.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Counters};
use crate::config::{KnowledgeMode, PositiveSource, TrainConfig};
use crate::encoders::{encode_example, Example};
use crate::error::{CheckpointError, Error, Result};
use crate::fusion::FreezePolicy;
use crate::kg::KnowledgeGraph;
use crate::losses::{loss_cls, loss_total};
use crate::model::{alignment_term, forward_example, KnowledgeOnTape, ModelParams, ModelVars, PipelineOptions};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::retrieval::NegativeSampler;
use crate::rng::{mix_seed, Xoshiro256};
use crate::tape::{softmax_slice, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Stage::Init),
            1 => Some(Stage::Pretrain),
            2 => Some(Stage::Finetune),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub stage: Stage,
    pub epoch: u64,
    pub steps: u64,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Fraction of examples with a gold node whose retrieved node matches it.
    pub retrieval_hit_rate: Option<f64>,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Appends one JSON line per epoch.
pub fn append_run_log(w: &mut dyn Write, stats: &EpochStats) -> Result<()> {
    serde_json::to_writer(&mut *w, stats)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub graph: KnowledgeGraph,
    pub params: ModelParams,
    pub adam: AdamState,
    rng: Xoshiro256,
    sampler: NegativeSampler,
    stage: Stage,
    pretrain_epochs_done: u64,
    finetune_epochs_done: u64,
    /// Knowledge embeddings, reused while the graph encoder is frozen.
    cached_k: Option<Tensor>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Trainer {
    pub fn new(cfg: TrainConfig, graph: KnowledgeGraph) -> Result<Self> {
        let params = ModelParams::new(&cfg, &graph)?;
        if graph.n_nodes() < 2 {
            return Err(Error::InvalidArgument("the knowledge graph needs at least two nodes".into()));
        }
        let adam = AdamState::for_tensors(params.tensors().iter().map(|(_, _, t)| *t));
        Ok(Self {
            rng: Xoshiro256::seed_from(mix_seed(cfg.seed, 1)),
            sampler: NegativeSampler::new(mix_seed(cfg.seed, 2)),
            cfg,
            graph,
            params,
            adam,
            stage: Stage::Init,
            pretrain_epochs_done: 0,
            finetune_epochs_done: 0,
            cached_k: None,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn pretrain_epochs_done(&self) -> u64 {
        self.pretrain_epochs_done
    }

    pub fn finetune_epochs_done(&self) -> u64 {
        self.finetune_epochs_done
    }

    pub fn sampler_step(&self) -> u64 {
        self.sampler.step
    }

    fn policy_for(&self, stage: Stage) -> FreezePolicy {
        match stage {
            Stage::Init => FreezePolicy::all_trainable(),
            Stage::Pretrain => FreezePolicy::pretrain(),
            Stage::Finetune => self.cfg.finetune_policy(),
        }
    }

    /// Switches stage: applies its freeze policy and restarts the optimizer.
    pub fn enter_stage(&mut self, stage: Stage) {
        if self.stage == stage {
            return;
        }
        self.stage = stage;
        self.params.set_trainable(&self.policy_for(stage));
        self.params.zero_grads();
        self.adam = AdamState::for_tensors(self.params.tensors().iter().map(|(_, _, t)| *t));
        self.cached_k = None;
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.cfg.lr, beta1: self.cfg.beta1, beta2: self.cfg.beta2, eps: self.cfg.adam_eps }
    }

    fn check_dataset(&self, data: &[Example]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for ex in data {
            ex.validate(self.cfg.d_i, self.cfg.vocab_size, self.cfg.n_classes)?;
        }
        Ok(())
    }

    fn knowledge_on(&mut self, tape: &Tape, vars: &ModelVars) -> Result<KnowledgeOnTape> {
        if self.params.policy().theta_k {
            let adj = tape.constant(self.graph.adjacency.clone());
            return KnowledgeOnTape::encode(tape, adj, vars);
        }
        if self.cached_k.is_none() {
            self.cached_k = Some(self.params.knowledge_embeddings(&self.graph)?);
        }
        Ok(KnowledgeOnTape::cached(tape, self.cached_k.as_ref().expect("just filled")))
    }

    fn positive(&self, ex: &Example, retrieved: usize) -> usize {
        match self.cfg.positive_source {
            PositiveSource::GoldNode => ex.gold_node.as_deref().and_then(|g| self.graph.index_of(g)).unwrap_or(retrieved),
            PositiveSource::Retrieved => retrieved,
        }
    }

    fn align_for(&mut self, tape: &Tape, m: Var, k: &KnowledgeOnTape, ex: &Example, retrieved: usize) -> Result<Var> {
        let n = k.n_nodes();
        let pos = self.positive(ex, retrieved);
        let negs = self.sampler.draw(pos, n, self.cfg.n_negatives.min(n - 1))?;
        alignment_term(tape, m, k, pos, &negs, self.cfg.tau, self.cfg.denominator)
    }

    fn options(&self) -> PipelineOptions {
        PipelineOptions::from_config(&self.cfg)
    }

    /// One optimizer step on `batch` under the current stage's objective:
    /// mean `L_align` in pretraining, mean `L_total` in fine-tuning.
    pub fn step(&mut self, batch: &[&Example]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.stage == Stage::Init {
            return Err(Error::InvalidArgument("enter a training stage before stepping".into()));
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let opts = self.options();
        let pretraining = self.stage == Stage::Pretrain;
        let needs_k = pretraining || opts.knowledge != KnowledgeMode::None || self.cfg.lambda1 > 0.0;
        let knowledge = if needs_k { Some(self.knowledge_on(&tape, &vars)?) } else { None };
        let loss_cfg = self.cfg.loss();

        let mut terms = Vec::with_capacity(batch.len());
        let mut correct = 0;
        for ex in batch {
            if pretraining {
                let k = knowledge.as_ref().expect("pretraining needs K");
                let m = encode_example(&tape, ex, &vars.encoders)?;
                let retrieved = k.best_match(&tape.value(m)).0;
                terms.push(self.align_for(&tape, m, k, ex, retrieved)?);
            } else {
                let fwd = forward_example(&tape, &vars, knowledge.as_ref(), ex, opts)?;
                if argmax(&tape.value(fwd.logits)) == ex.label {
                    correct += 1;
                }
                let task = loss_cls(&tape, fwd.logits, ex.label)?;
                let align = match (&knowledge, fwd.retrieved) {
                    (Some(k), Some((r, _))) if loss_cfg.lambda1 > 0.0 => self.align_for(&tape, fwd.m, k, ex, r)?,
                    _ => tape.constant_vec(vec![0.0]),
                };
                terms.push(loss_total(&tape, align, task, &loss_cfg).map_err(|e| self.numeric(e))?);
            }
        }
        let stacked = tape.stack(&terms)?;
        let total = tape.sum(stacked)?;
        let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric { step: self.adam.step + 1, what: format!("loss is {value}") });
        }
        let grads = tape.backward(loss)?;
        self.params.accumulate_grads(&grads, &vars)?;
        let hp = self.adam_config();
        let mut slots: Vec<(&str, &mut Tensor)> = self.params.tensors_mut().into_iter().map(|(n, _, t)| (n, t)).collect();
        adam_step(&mut slots, &mut self.adam, &hp)?;
        if slots.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric { step: self.adam.step, what: "parameter became non-finite".into() });
        }
        if self.params.policy().theta_k {
            self.cached_k = None;
        }
        Ok(StepOutcome { loss: value, correct })
    }

    fn numeric(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(what) => Error::Numeric { step: self.adam.step + 1, what: what.to_string() },
            other => other,
        }
    }

    fn epoch(&mut self, data: &[Example]) -> Result<(u64, f64, usize)> {
        self.check_dataset(data)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut steps, mut loss_sum, mut correct) = (0u64, 0.0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let out = self.step(&batch)?;
            loss_sum += out.loss;
            correct += out.correct;
            steps += 1;
        }
        Ok((steps, loss_sum / steps as f64, correct))
    }

    /// One pass of contrastive alignment; the task head stays frozen.
    pub fn pretrain_epoch(&mut self, data: &[Example]) -> Result<EpochStats> {
        self.enter_stage(Stage::Pretrain);
        let (steps, mean_loss, _) = self.epoch(data)?;
        self.pretrain_epochs_done += 1;
        Ok(EpochStats { stage: Stage::Pretrain, epoch: self.pretrain_epochs_done, steps, mean_loss, accuracy: None })
    }

    /// One pass of `λ1·L_align + λ2·L_cls` under the configured freeze policy.
    /// The reported accuracy is measured on the fly, before each update.
    pub fn finetune_epoch(&mut self, data: &[Example]) -> Result<EpochStats> {
        self.enter_stage(Stage::Finetune);
        let (steps, mean_loss, correct) = self.epoch(data)?;
        self.finetune_epochs_done += 1;
        Ok(EpochStats {
            stage: Stage::Finetune,
            epoch: self.finetune_epochs_done,
            steps,
            mean_loss,
            accuracy: Some(correct as f64 / data.len() as f64),
        })
    }

    /// Runs whatever remains of both stages, so a resumed trainer picks up
    /// where it stopped. Pretraining is skipped when `pretrain` is `None`.
    pub fn fit(
        &mut self,
        pretrain: Option<&[Example]>,
        finetune: &[Example],
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<EpochStats>> {
        let mut all = Vec::new();
        if let Some(data) = pretrain {
            while self.stage != Stage::Finetune && self.pretrain_epochs_done < self.cfg.pretrain_epochs as u64 {
                let s = self.pretrain_epoch(data)?;
                if let Some(w) = log.as_deref_mut() {
                    append_run_log(w, &s)?;
                }
                all.push(s);
            }
        }
        while self.finetune_epochs_done < self.cfg.finetune_epochs as u64 {
            let s = self.finetune_epoch(finetune)?;
            if let Some(w) = log.as_deref_mut() {
                append_run_log(w, &s)?;
            }
            all.push(s);
        }
        Ok(all)
    }

    /// Accuracy, mean classification loss and retrieval hit rate, without
    /// touching any parameter.
    pub fn evaluate(&self, data: &[Example]) -> Result<EvalReport> {
        self.check_dataset(data)?;
        let k = self.params.knowledge_embeddings(&self.graph)?;
        let opts = self.options();
        let (mut loss_sum, mut hits, mut gold, mut correct) = (0.0, 0usize, 0usize, 0usize);
        let mut predictions = Vec::with_capacity(data.len());
        for ex in data {
            let tape = Tape::new();
            let vars = self.bind_constants(&tape);
            let kt = KnowledgeOnTape::cached(&tape, &k);
            let fwd = forward_example(&tape, &vars, Some(&kt), ex, opts)?;
            let logits = tape.value(fwd.logits).to_vec();
            let pred = argmax(&logits);
            predictions.push(pred);
            if pred == ex.label {
                correct += 1;
            }
            loss_sum += -softmax_slice(&logits)[ex.label].ln();
            if let Some(g) = ex.gold_node.as_deref().and_then(|g| self.graph.index_of(g)) {
                gold += 1;
                if fwd.retrieved.map(|r| r.0) == Some(g) {
                    hits += 1;
                }
            }
        }
        let n = data.len();
        Ok(EvalReport {
            n,
            accuracy: correct as f64 / n as f64,
            mean_loss: loss_sum / n as f64,
            retrieval_hit_rate: (gold > 0).then(|| hits as f64 / gold as f64),
            predictions,
        })
    }

    fn bind_constants(&self, tape: &Tape) -> ModelVars {
        let vars: Vec<Var> = self.params.tensors().iter().map(|(_, _, t)| tape.constant((*t).clone())).collect();
        self.params.vars_from(&vars)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let plain = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("finite");
        let tensors = self.params.tensors().iter().map(|(n, _, t)| ((*n).to_string(), plain(t, t.data().to_vec()))).collect();
        let mut optimizer = Vec::new();
        for (prefix, bufs) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for ((n, _, t), b) in self.params.tensors().iter().zip(bufs) {
                optimizer.push((format!("{prefix}{n}"), plain(t, b.clone())));
            }
        }
        Checkpoint {
            config_json: self.cfg.to_json(),
            tensors,
            optimizer,
            counters: Counters {
                stage: self.stage.code(),
                adam_step: self.adam.step,
                sampler_step: self.sampler.step,
                pretrain_epochs_done: self.pretrain_epochs_done,
                finetune_epochs_done: self.finetune_epochs_done,
            },
            rng_state: self.rng.state(),
        }
    }

    /// Restores a run. The graph supplies the adjacency; node features come
    /// from the checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, graph: KnowledgeGraph) -> Result<Self> {
        let cfg = TrainConfig::from_json_str(&ck.config_json)?;
        let mut t = Trainer::new(cfg, graph)?;
        let malformed = |m: String| Error::Checkpoint(CheckpointError::Malformed(m));
        let stage = Stage::from_code(ck.counters.stage).ok_or_else(|| malformed(format!("unknown stage {}", ck.counters.stage)))?;
        if ck.tensors.len() != crate::model::N_TENSORS || ck.optimizer.len() != 2 * crate::model::N_TENSORS {
            return Err(malformed("unexpected number of records".into()));
        }
        for ((name, _, dst), (src_name, src)) in t.params.tensors_mut().into_iter().zip(&ck.tensors) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(malformed(format!("record `{src_name}` {:?} does not fit `{name}` {:?}", src.shape(), dst.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        let names: Vec<&str> = t.params.tensors().iter().map(|(n, _, _)| *n).collect();
        for (i, (rec_name, rec)) in ck.optimizer.iter().enumerate() {
            let (prefix, slot) = if i < names.len() { ("adam.m/", i) } else { ("adam.v/", i - names.len()) };
            if *rec_name != format!("{prefix}{}", names[slot]) || rec.len() != t.adam.m[slot].len() {
                return Err(malformed(format!("unexpected optimizer record `{rec_name}`")));
            }
            let buf = if i < names.len() { &mut t.adam.m[slot] } else { &mut t.adam.v[slot] };
            buf.copy_from_slice(rec.data());
        }
        t.stage = stage;
        t.params.set_trainable(&t.policy_for(stage));
        t.params.zero_grads();
        t.adam.step = ck.counters.adam_step;
        t.sampler.step = ck.counters.sampler_step;
        t.pretrain_epochs_done = ck.counters.pretrain_epochs_done;
        t.finetune_epochs_done = ck.counters.finetune_epochs_done;
        t.rng = Xoshiro256::from_state(ck.rng_state);
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_graph, Triple};

    fn toy() -> (TrainConfig, KnowledgeGraph, Vec<Example>) {
        let cfg = TrainConfig {
            d_i: 3,
            d_t: 4,
            d_m: 4,
            d_e: 4,
            d_k: 4,
            d_h: 6,
            d_a: 4,
            vocab_size: 5,
            n_classes: 2,
            batch_size: 2,
            n_negatives: 3,
            seed: 11,
            ..Default::default()
        };
        let g = build_graph(
            &[Triple::new("a", "r", "x"), Triple::new("b", "r", "y"), Triple::new("a", "s", "b")],
            4,
            3,
        )
        .unwrap();
        let data = vec![
            Example { image_features: vec![1.0, 0.0, 0.5], token_ids: vec![0, 1], label: 0, gold_node: Some("a".into()) },
            Example { image_features: vec![0.0, 1.0, -0.5], token_ids: vec![2, 3], label: 1, gold_node: Some("b".into()) },
        ];
        (cfg, g, data)
    }

    #[test]
    fn step_before_stage_is_an_error() {
        let (cfg, g, data) = toy();
        let mut t = Trainer::new(cfg, g).unwrap();
        assert!(t.step(&[&data[0]]).is_err());
        assert!(matches!(t.pretrain_epoch(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn pretraining_loss_decreases() {
        let (cfg, g, data) = toy();
        let mut t = Trainer::new(cfg, g).unwrap();
        let losses: Vec<f64> = (0..50).map(|_| t.pretrain_epoch(&data).unwrap().mean_loss).collect();
        let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down >= 45, "{down} decreases: {losses:?}");
    }

    #[test]
    fn pretraining_ignores_lambdas() {
        let (cfg, g, data) = toy();
        let other = TrainConfig { lambda1: 0.3, lambda2: 7.0, ..cfg.clone() };
        let mut a = Trainer::new(cfg, g.clone()).unwrap();
        let mut b = Trainer::new(other, g).unwrap();
        for _ in 0..3 {
            assert_eq!(a.pretrain_epoch(&data).unwrap().mean_loss.to_bits(), b.pretrain_epoch(&data).unwrap().mean_loss.to_bits());
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn evaluate_counts_against_loop() {
        let (cfg, g, data) = toy();
        let t = Trainer::new(cfg, g).unwrap();
        let r = t.evaluate(&data).unwrap();
        let hits = r.predictions.iter().zip(&data).filter(|(p, e)| **p == e.label).count();
        assert_eq!(r.accuracy, hits as f64 / 2.0);
        assert!(r.retrieval_hit_rate.is_some());
        assert!(matches!(t.evaluate(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn checkpoint_round_trip_continues_identically() {
        let (cfg, g, data) = toy();
        let mut a = Trainer::new(cfg, g.clone()).unwrap();
        a.pretrain_epoch(&data).unwrap();
        let ck = a.to_checkpoint();
        let mut b = Trainer::from_checkpoint(&ck, g).unwrap();
        assert_eq!(b.to_checkpoint(), ck);
        for _ in 0..2 {
            assert_eq!(a.finetune_epoch(&data).unwrap(), b.finetune_epoch(&data).unwrap());
        }
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    }
}
