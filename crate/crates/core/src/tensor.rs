//! Dense row-major `f64` tensors with an optional gradient slot.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::rng::Xoshiro256;

/// How a fresh tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { low: f64, high: f64, seed: u64 },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("tensor shape must have at least one dimension".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("zero-sized dimension in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} overflows")))
}

/// Fan-in/fan-out used by xavier init; weights map `shape[0]` inputs to `shape[1]` outputs.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (*d, *d),
        [rows, cols] => (*rows, *cols),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
        [] => (1, 1),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = numel(&shape)?;
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let n = numel(shape)?;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::NonFinite("constant init"));
                }
                vec![c; n]
            }
            Init::Uniform { low, high, seed } => {
                if !(low.is_finite() && high.is_finite()) || low > high {
                    return Err(Error::InvalidArgument(format!(
                        "uniform init needs finite low <= high, got [{low}, {high}]"
                    )));
                }
                let mut rng = Xoshiro256::seed_from(seed);
                (0..n).map(|_| low + (high - low) * rng.random::<f64>()).collect()
            }
            Init::Xavier { seed } => {
                let (fan_in, fan_out) = fans(shape);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = Xoshiro256::seed_from(seed);
                (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect()
            }
        };
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(shape, Init::Zeros).expect("valid shape")
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor trainable; a trainable tensor always owns a grad slot.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err(
                "accumulate_grad",
                format!("gradient has {} elements, tensor has {}", g.len(), self.data.len()),
            ));
        }
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Drops the gradient buffer entirely (used for tests of the missing-grad path).
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Mutable access to content and gradient together, for optimizers.
    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }
}
