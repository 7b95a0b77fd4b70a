//! Training objectives: contrastive alignment, classification, sequence
//! cross-entropy and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Denominator of the alignment softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Positive plus negatives (InfoNCE). Always non-negative.
    #[default]
    Standard,
    /// Negatives only. Can go negative once the positive dominates.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_negatives: usize,
    pub denominator: Denominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.07, lambda1: 1.0, lambda2: 1.0, n_negatives: 8, denominator: Denominator::Standard }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config { key: "tau".into(), message: format!("must be > 0, got {}", self.tau) });
        }
        for (key, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config { key: key.into(), message: format!("must be >= 0, got {v}") });
            }
        }
        if self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::Config { key: "lambda1".into(), message: "lambda1 + lambda2 must be > 0".into() });
        }
        if self.n_negatives == 0 {
            return Err(Error::Config { key: "n_negatives".into(), message: "must be >= 1".into() });
        }
        Ok(())
    }
}

/// `-log( e^{cos(m,k+)/τ} / Z )` where `Z` sums over the positive and the
/// negatives (or only the negatives under [`Denominator::PaperLiteral`]).
pub fn loss_align(tape: &Tape, m: Var, k_pos: Var, k_negs: &[Var], tau: f64, denominator: Denominator) -> Result<Var> {
    if k_negs.is_empty() {
        return Err(Error::InvalidArgument("alignment loss needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let pos = tape.cosine(m, k_pos)?;
    let mut sims = Vec::with_capacity(k_negs.len() + 1);
    sims.push(pos);
    for &k in k_negs {
        sims.push(tape.cosine(m, k)?);
    }
    match denominator {
        Denominator::Standard => {
            let logits = tape.stack(&sims)?;
            let logits = tape.scale(logits, 1.0 / tau)?;
            tape.cross_entropy(logits, &[0])
        }
        Denominator::PaperLiteral => {
            let negs = tape.stack(&sims[1..])?;
            let negs = tape.scale(negs, 1.0 / tau)?;
            let lse = tape.log_sum_exp(negs)?;
            let pos = tape.scale(pos, 1.0 / tau)?;
            tape.sub(lse, pos)
        }
    }
}

/// Softmax cross-entropy of rank-1 logits against one label.
pub fn loss_cls(tape: &Tape, logits: Var, label: usize) -> Result<Var> {
    if tape.shape(logits).len() != 1 {
        return Err(Error::InvalidArgument(format!("class logits must be rank 1, got {:?}", tape.shape(logits))));
    }
    tape.cross_entropy(logits, &[label])
}

/// Teacher-forced sequence loss: per-step cross-entropy summed over `T` steps.
pub fn loss_gen(tape: &Tape, step_logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(step_logits);
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("step logits must be T x V, got {shape:?}")));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("sequence must have at least one step".into()));
    }
    tape.cross_entropy(step_logits, targets)
}

/// `λ1 · align + λ2 · task`.
pub fn loss_total(tape: &Tape, align: Var, task: Var, cfg: &LossConfig) -> Result<Var> {
    for v in [align, task] {
        if tape.value(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("loss_total"));
        }
    }
    let a = tape.scale(align, cfg.lambda1)?;
    let t = tape.scale(task, cfg.lambda2)?;
    tape.add(a, t)
}
