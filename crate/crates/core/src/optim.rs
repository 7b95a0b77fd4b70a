//! Adam with bias correction over a fixed list of named tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers, one pair per tensor slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = tensors.into_iter().map(Tensor::len).collect();
        Self::new(&sizes)
    }
}

/// One Adam update. Frozen tensors are skipped entirely (their moments are
/// left as they are); trainable ones must carry a gradient, which is zeroed
/// after the update.
pub fn adam_step(tensors: &mut [(&str, &mut Tensor)], state: &mut AdamState, hp: &AdamConfig) -> Result<()> {
    if tensors.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors, got {}",
            state.m.len(),
            tensors.len()
        )));
    }
    for ((name, t), m) in tensors.iter().zip(&state.m) {
        if t.len() != m.len() {
            return Err(Error::InvalidArgument(format!("optimizer buffer for `{name}` has the wrong size")));
        }
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::MissingGrad((*name).to_string()));
        }
    }
    state.step += 1;
    let t_step = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t_step);
    let bc2 = 1.0 - hp.beta2.powi(t_step);
    for (i, (_, t)) in tensors.iter_mut().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let (data, grad) = t.data_and_grad_mut();
        let grad = grad.expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            grad[j] = 0.0;
        }
    }
    Ok(())
}
