//! Gated knowledge integration, the task adaptor head and the freeze policy.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::ModelParams;
use crate::tape::{Tape, Var};
use crate::tensor::{Init, Tensor};

/// How the gate output becomes `m'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `m' = σ(W_g [m; k*] + b)`.
    #[default]
    Literal,
    /// `g = σ(W_g [m; k*] + b)`, `m' = g ⊙ m + (1 - g) ⊙ k*`.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub b: Tensor,
    pub mode: GateMode,
}

impl GateParams {
    pub fn new(d_m: usize, mode: GateMode, seed: u64) -> Result<Self> {
        Ok(Self {
            w: Tensor::create(&[2 * d_m, d_m], Init::Xavier { seed })?,
            b: Tensor::create(&[d_m], Init::Zeros)?,
            mode,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w: Var,
    pub b: Var,
    pub mode: GateMode,
}

pub fn gate_integrate(tape: &Tape, m: Var, k_star: Var, p: &GateVars) -> Result<Var> {
    let (sm, sk) = (tape.shape(m), tape.shape(k_star));
    if sm != sk {
        return Err(shape_err("gate_integrate", format!("m {sm:?} vs k* {sk:?}")));
    }
    let joined = tape.concat(m, k_star)?;
    let pre = tape.matmul(joined, p.w)?;
    let pre = tape.add(pre, p.b)?;
    let gate = tape.sigmoid(pre)?;
    match p.mode {
        GateMode::Literal => Ok(gate),
        GateMode::Residual => {
            // g⊙m + (1-g)⊙k* == k* + g⊙(m - k*)
            let diff = tape.sub(m, k_star)?;
            let scaled = tape.mul(gate, diff)?;
            tape.add(k_star, scaled)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl AdaptorParams {
    pub fn new(d_m: usize, d_a: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            w1: Tensor::create(&[2 * d_m, d_a], Init::Xavier { seed })?,
            b1: Tensor::create(&[d_a], Init::Zeros)?,
            w_out: Tensor::create(&[d_a, classes], Init::Xavier { seed: seed.wrapping_add(1) })?,
            b_out: Tensor::create(&[classes], Init::Zeros)?,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.w_out.cols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptorVars {
    pub w1: Var,
    pub b1: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Raw class logits: `relu([m'; k*] · W_a1 + b_a1) · W_out + b_out`.
pub fn adapt_task(tape: &Tape, m_prime: Var, k_star: Var, p: &AdaptorVars) -> Result<Var> {
    let (sm, sk) = (tape.shape(m_prime), tape.shape(k_star));
    if sm != sk {
        return Err(shape_err("adapt_task", format!("m' {sm:?} vs k* {sk:?}")));
    }
    let joined = tape.concat(m_prime, k_star)?;
    let pre = tape.matmul(joined, p.w1)?;
    let pre = tape.add(pre, p.b1)?;
    let h = tape.relu(pre)?;
    let logits = tape.matmul(h, p.w_out)?;
    tape.add(logits, p.b_out)
}

/// Named parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    ThetaV,
    ThetaT,
    ThetaM,
    ThetaK,
    WG,
    ThetaA,
}

impl Group {
    pub const ALL: [Group; 6] = [Group::ThetaV, Group::ThetaT, Group::ThetaM, Group::ThetaK, Group::WG, Group::ThetaA];

    pub fn name(self) -> &'static str {
        match self {
            Group::ThetaV => "theta_v",
            Group::ThetaT => "theta_t",
            Group::ThetaM => "theta_m",
            Group::ThetaK => "theta_k",
            Group::WG => "w_g",
            Group::ThetaA => "theta_a",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameter groups an optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePolicy {
    pub theta_v: bool,
    pub theta_t: bool,
    pub theta_m: bool,
    pub theta_k: bool,
    pub w_g: bool,
    pub theta_a: bool,
}

impl FreezePolicy {
    pub fn all_trainable() -> Self {
        Self { theta_v: true, theta_t: true, theta_m: true, theta_k: true, w_g: true, theta_a: true }
    }

    /// Backbone and graph encoder frozen; gate and adaptor train.
    pub fn finetune_default() -> Self {
        Self::from_frozen(&[Group::ThetaV, Group::ThetaT, Group::ThetaM, Group::ThetaK])
    }

    /// Everything except the task head.
    pub fn pretrain() -> Self {
        Self::from_frozen(&[Group::ThetaA])
    }

    pub fn from_frozen(frozen: &[Group]) -> Self {
        let mut p = Self::all_trainable();
        for &g in frozen {
            p.set(g, false);
        }
        p
    }

    pub fn trainable(&self, g: Group) -> bool {
        match g {
            Group::ThetaV => self.theta_v,
            Group::ThetaT => self.theta_t,
            Group::ThetaM => self.theta_m,
            Group::ThetaK => self.theta_k,
            Group::WG => self.w_g,
            Group::ThetaA => self.theta_a,
        }
    }

    pub fn set(&mut self, g: Group, on: bool) {
        let slot = match g {
            Group::ThetaV => &mut self.theta_v,
            Group::ThetaT => &mut self.theta_t,
            Group::ThetaM => &mut self.theta_m,
            Group::ThetaK => &mut self.theta_k,
            Group::WG => &mut self.w_g,
            Group::ThetaA => &mut self.theta_a,
        };
        *slot = on;
    }

    pub fn frozen_groups(&self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|&g| !self.trainable(g)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if Group::ALL.iter().all(|&g| !self.trainable(g)) {
            return Err(Error::InvalidArgument("freeze policy leaves no trainable group".into()));
        }
        Ok(())
    }
}

/// Sets per-tensor trainability from the policy.
pub fn apply_freeze_policy(mut params: ModelParams, policy: &FreezePolicy) -> Result<ModelParams> {
    policy.validate()?;
    params.set_trainable(policy);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_vars(tape: &Tape, w: Tensor, b: Tensor, mode: GateMode) -> GateVars {
        GateVars { w: tape.leaf(&w), b: tape.leaf(&b), mode }
    }

    #[test]
    fn literal_gate_zero_weights_is_half() {
        let tape = Tape::new();
        let p = gate_vars(&tape, Tensor::zeros(&[4, 2]), Tensor::zeros(&[2]), GateMode::Literal);
        let m = tape.constant_vec(vec![0.7, -0.3]);
        let k = tape.constant_vec(vec![-1.0, 2.0]);
        let out = gate_integrate(&tape, m, k, &p).unwrap();
        assert_eq!(&*tape.value(out), &[0.5, 0.5]);
    }

    #[test]
    fn residual_gate_saturates_to_m() {
        let tape = Tape::new();
        let bias = Tensor::create(&[2], Init::Constant(50.0)).unwrap();
        let p = gate_vars(&tape, Tensor::zeros(&[4, 2]), bias, GateMode::Residual);
        let m = tape.constant_vec(vec![0.7, -0.3]);
        let k = tape.constant_vec(vec![-1.0, 2.0]);
        let out = gate_integrate(&tape, m, k, &p).unwrap();
        // σ(50) = 1 - 2e-22, so the k* share is far below 1e-9
        for (o, e) in tape.value(out).iter().zip([0.7, -0.3]) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_shape_mismatch() {
        let tape = Tape::new();
        let p = gate_vars(&tape, Tensor::zeros(&[4, 2]), Tensor::zeros(&[2]), GateMode::Literal);
        let m = tape.constant_vec(vec![0.7, -0.3]);
        let k = tape.constant_vec(vec![1.0]);
        assert!(gate_integrate(&tape, m, k, &p).is_err());
    }

    #[test]
    fn adaptor_zero_inputs_uniform() {
        let tape = Tape::new();
        let p = AdaptorParams::new(2, 3, 4, 1).unwrap();
        let vars = AdaptorVars {
            w1: tape.leaf(&p.w1),
            b1: tape.leaf(&p.b1),
            w_out: tape.leaf(&p.w_out),
            b_out: tape.leaf(&p.b_out),
        };
        let z = tape.constant_vec(vec![0.0, 0.0]);
        let logits = adapt_task(&tape, z, z, &vars).unwrap();
        assert_eq!(&*tape.value(logits), &[0.0; 4]);
        let post = crate::tape::softmax_slice(&tape.value(logits));
        assert!(post.iter().all(|&p| p == 0.25));
    }

    #[test]
    fn adaptor_hand_weights_flip_with_sign() {
        // W_a1 routes m'_0 to h_0 and -m'_0 to h_1; W_out reads class 0 from h_0, class 1 from h_1
        let w1 = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let w_out = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w1 = Tensor::new(vec![4, 2], [w1.data(), &[0.0; 4]].concat()).unwrap();
        for (x, class) in [(0.8, 0usize), (-0.8, 1usize)] {
            let tape = Tape::new();
            let vars = AdaptorVars {
                w1: tape.leaf(&w1),
                b1: tape.leaf(&Tensor::zeros(&[2])),
                w_out: tape.leaf(&w_out),
                b_out: tape.leaf(&Tensor::zeros(&[2])),
            };
            let m = tape.constant_vec(vec![x, 0.0]);
            let k = tape.constant_vec(vec![0.0, 0.0]);
            let logits = tape.value(adapt_task(&tape, m, k, &vars).unwrap()).to_vec();
            let argmax = if logits[0] >= logits[1] { 0 } else { 1 };
            assert_eq!(argmax, class);
        }
    }

    #[test]
    fn policy_defaults() {
        let p = FreezePolicy::finetune_default();
        assert_eq!(p.frozen_groups(), vec![Group::ThetaV, Group::ThetaT, Group::ThetaM, Group::ThetaK]);
        assert!(p.w_g && p.theta_a);
        assert!(FreezePolicy::from_frozen(&Group::ALL).validate().is_err());
        assert_eq!(FreezePolicy::pretrain().frozen_groups(), vec![Group::ThetaA]);
    }
}
