//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Values are copied in as
//! leaves, each op appends one node, and [`Tape::backward`] replays the nodes
//! in reverse. Nodes that do not depend on a tracked leaf carry no gradient and
//! are skipped during the replay.

use std::cell::{Ref, RefCell};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied op: maps the upstream gradient
/// to one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { a: Var, b: Var, da: usize, db: usize },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSumExp(Var),
    Cosine { a: Var, b: Var },
    Sum(Var),
    MeanRows { x: Var, rows: usize },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    Row { x: Var, index: usize, cols: usize },
    Stack(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, cols: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Reverse-mode computation tape. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar with respect to every tracked node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    tape_len: usize,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into the tensor's grad slot.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if v.0 >= self.tape_len {
            return Err(Error::NotOnTape(v.0));
        }
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                if tensor.requires_grad() {
                    // touched by nothing: grad slot stays as is but must exist
                    tensor.set_requires_grad(true);
                }
                Ok(())
            }
        }
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let (arg, max) = first_max(x);
    max + tail_mass(x, arg, max).ln_1p()
}

fn first_max(x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in x.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// `sum_{i != arg} exp(x_i - max)`, so that the sum over all terms is `1 + tail`.
fn tail_mass(x: &[f64], arg: usize, max: f64) -> f64 {
    x.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, v)| (v - max).exp()).sum()
}

/// Per-row softmax cross-entropy, `logsumexp(row) - row[target]`, arranged so
/// a confident correct row keeps full relative precision.
pub(crate) fn cross_entropy_row(row: &[f64], target: usize) -> f64 {
    let (arg, max) = first_max(row);
    (max - row[target]) + tail_mass(row, arg, max).ln_1p()
}

/// Denominator floor for cosine similarity; also the zero-norm cutoff.
pub const COSINE_EPS: f64 = 1e-12;

/// `a·b / max(‖a‖‖b‖, ε)`, and 0 if either norm is below ε.
pub fn cosine_slice(a: &[f64], b: &[f64]) -> f64 {
    let (dot, na, nb) = dot_norms(a, b);
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    dot / (na * nb).max(COSINE_EPS)
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.len() {
            Ok(())
        } else {
            Err(Error::NotOnTape(v.0))
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Records a tensor; gradients flow back to it iff it requires grad.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a raw vector as an untracked rank-1 constant.
    pub fn constant_vec(&self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone()).expect("tape values are finite")
    }

    /// `a · b`. A rank-1 `a` is read as a row vector and yields a rank-1 result.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, vector) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(shape_err("matmul", format!("lhs must be rank 1 or 2, got {sa:?}"))),
        };
        let n = match sb.as_slice() {
            [kb, n] if *kb == k => *n,
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for (o, w) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *o += x * w;
                    }
                }
            }
            out
        };
        let shape = if vector { vec![n] } else { vec![m, n] };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    /// Elementwise sum. A rank-1 `b` may broadcast over the rows of a rank-2 `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0];
        if sa != sb && !broadcast {
            return Err(shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let w = bv.len();
            av.iter().enumerate().map(|(i, x)| x + bv[i % w]).collect()
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa, out, Op::Add { a, b }, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect()
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, Op::Sub { a, b }, tracked))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        if !c.is_finite() {
            return Err(Error::NonFinite("scale"));
        }
        let out = self.value(x).iter().map(|v| v * c).collect();
        Ok(self.push(self.shape(x), out, Op::Scale { x, c }, self.tracked(x)))
    }

    /// Concatenation along the last axis.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let outer = av.len() / da;
            let mut out = Vec::with_capacity(av.len() + bv.len());
            for r in 0..outer {
                out.extend_from_slice(&av[r * da..(r + 1) * da]);
                out.extend_from_slice(&bv[r * db..(r + 1) * db]);
            }
            out
        };
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, Op::Concat { a, b, da, db }, tracked))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        Ok(self.push(self.shape(x), out, op, self.tracked(x)))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax_row(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.shape(x).len() != 1 {
            return Err(shape_err("softmax_row", format!("expected rank 1, got {:?}", self.shape(x))));
        }
        let out = softmax_slice(&self.value(x));
        Ok(self.push(self.shape(x), out, Op::Softmax(x), self.tracked(x)))
    }

    pub fn log_sum_exp(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.shape(x).len() != 1 {
            return Err(shape_err("log_sum_exp", format!("expected rank 1, got {:?}", self.shape(x))));
        }
        let out = log_sum_exp(&self.value(x));
        Ok(self.push(vec![1], vec![out], Op::LogSumExp(x), self.tracked(x)))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("cosine", a, b)?;
        if shape.len() != 1 {
            return Err(shape_err("cosine", format!("expected rank 1, got {shape:?}")));
        }
        let out = cosine_slice(&self.value(a), &self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![1], vec![out], Op::Cosine { a, b }, tracked))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).iter().sum();
        Ok(self.push(vec![1], vec![out], Op::Sum(x), self.tracked(x)))
    }

    /// Mean over the rows of a rank-2 tensor.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x);
        let [rows, cols] = shape[..] else {
            return Err(shape_err("mean_rows", format!("expected rank 2, got {shape:?}")));
        };
        let out = {
            let xv = self.value(x);
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= rows as f64);
            out
        };
        Ok(self.push(vec![cols], out, Op::MeanRows { x, rows }, self.tracked(x)))
    }

    /// Selects rows `ids` of a rank-2 table (embedding lookup).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let shape = self.shape(table);
        let [rows, cols] = shape[..] else {
            return Err(shape_err("gather_rows", format!("expected rank 2, got {shape:?}")));
        };
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!("row index {bad} out of range 0..{rows}")));
        }
        let out = {
            let tv = self.value(table);
            ids.iter().flat_map(|&i| tv[i * cols..(i + 1) * cols].iter().copied()).collect()
        };
        let op = Op::Gather { table, ids: ids.to_vec(), cols };
        Ok(self.push(vec![ids.len(), cols], out, op, self.tracked(table)))
    }

    /// Row `index` of a rank-2 tensor, as a rank-1 tensor.
    pub fn row(&self, x: Var, index: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x);
        let [rows, cols] = shape[..] else {
            return Err(shape_err("row", format!("expected rank 2, got {shape:?}")));
        };
        if index >= rows {
            return Err(Error::InvalidArgument(format!("row {index} out of range 0..{rows}")));
        }
        let out = self.value(x)[index * cols..(index + 1) * cols].to_vec();
        Ok(self.push(vec![cols], out, Op::Row { x, index, cols }, self.tracked(x)))
    }

    /// Packs scalars into a rank-1 tensor.
    pub fn stack(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("stack needs at least one scalar".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut tracked = false;
        for &x in xs {
            self.check(x)?;
            if self.shape(x) != [1] {
                return Err(shape_err("stack", format!("element has shape {:?}", self.shape(x))));
            }
            out.push(self.scalar(x));
            tracked |= self.tracked(x);
        }
        Ok(self.push(vec![xs.len()], out, Op::Stack(xs.to_vec()), tracked))
    }

    /// Summed softmax cross-entropy. Rank-1 logits take one target; rank-2
    /// logits take one target per row.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let shape = self.shape(logits);
        let (rows, cols) = match shape[..] {
            [c] => (1, c),
            [r, c] => (r, c),
            _ => return Err(shape_err("cross_entropy", format!("expected rank 1 or 2, got {shape:?}"))),
        };
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} logit rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidArgument(format!("target {bad} out of range 0..{cols}")));
        }
        let out = {
            let lv = self.value(logits);
            targets
                .iter()
                .enumerate()
                .map(|(r, &t)| cross_entropy_row(&lv[r * cols..(r + 1) * cols], t))
                .fold(0.0, |acc, v| acc + v)
        };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), cols };
        Ok(self.push(vec![1], vec![out], op, self.tracked(logits)))
    }

    /// Records an op with a caller-provided forward value and backward rule.
    pub fn custom(&self, inputs: &[Var], shape: Vec<usize>, value: Vec<f64>, backward: CustomBackward) -> Result<Var> {
        let tracked = inputs.iter().try_fold(false, |acc, &v| {
            self.check(v)?;
            Ok::<_, Error>(acc || self.tracked(v))
        })?;
        if shape.iter().product::<usize>() != value.len() {
            return Err(shape_err("custom", format!("shape {shape:?} vs {} values", value.len())));
        }
        Ok(self.push(shape, value, Op::Custom { inputs: inputs.to_vec(), backward }, tracked))
    }

    /// Gradients of a scalar `loss` with respect to every tracked node.
    /// The tape is left intact, so calling this twice yields the same result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", nodes[loss.0].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, tape_len: nodes.len() })
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let len = |v: Var| nodes[v.0].value.len();
    // Accumulates into an input's gradient only when that input is tracked.
    let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
        if nodes[v.0].tracked {
            add_into(&mut grads[v.0], len(v), |buf| f(buf));
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            acc(*a, &mut |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let row = &bv[p * n..(p + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        ga[i * k + p] += row.iter().zip(gr).map(|(w, x)| w * x).sum::<f64>();
                    }
                }
            });
            acc(*b, &mut |gb| {
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += x * gv;
                        }
                    }
                }
            });
        }
        Op::Add { a, b } => {
            acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            let w = len(*b);
            acc(*b, &mut |gb| {
                for (i, v) in g.iter().enumerate() {
                    gb[i % w] += v;
                }
            });
        }
        Op::Sub { a, b } => {
            acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            acc(*a, &mut |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            acc(*b, &mut |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale { x, c } => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
        Op::Concat { a, b, da, db } => {
            let (da, db) = (*da, *db);
            let outer = g.len() / (da + db);
            acc(*a, &mut |ga| {
                for r in 0..outer {
                    for j in 0..da {
                        ga[r * da + j] += g[r * (da + db) + j];
                    }
                }
            });
            acc(*b, &mut |gb| {
                for r in 0..outer {
                    for j in 0..db {
                        gb[r * db + j] += g[r * (da + db) + da + j];
                    }
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Tanh(x) => {
            let y = &node.value;
            acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += y[i] * (g[i] - dot);
                }
            });
        }
        Op::LogSumExp(x) => {
            let p = softmax_slice(val(*x));
            acc(*x, &mut |gx| gx.iter_mut().zip(&p).for_each(|(o, pi)| *o += g[0] * pi));
        }
        Op::Cosine { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (dot, na, nb) = dot_norms(av, bv);
            if na < COSINE_EPS || nb < COSINE_EPS {
                return;
            }
            let prod = na * nb;
            if prod >= COSINE_EPS {
                let s = dot / prod;
                acc(*a, &mut |ga| {
                    for i in 0..av.len() {
                        ga[i] += g[0] * (bv[i] / prod - s * av[i] / (na * na));
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bv.len() {
                        gb[i] += g[0] * (av[i] / prod - s * bv[i] / (nb * nb));
                    }
                });
            } else {
                acc(*a, &mut |ga| ga.iter_mut().zip(bv).for_each(|(o, y)| *o += g[0] * y / COSINE_EPS));
                acc(*b, &mut |gb| gb.iter_mut().zip(av).for_each(|(o, x)| *o += g[0] * x / COSINE_EPS));
            }
        }
        Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
        Op::MeanRows { x, rows } => {
            let cols = g.len();
            let inv = 1.0 / *rows as f64;
            acc(*x, &mut |gx| {
                for r in 0..*rows {
                    for j in 0..cols {
                        gx[r * cols + j] += g[j] * inv;
                    }
                }
            });
        }
        Op::Gather { table, ids, cols } => {
            let cols = *cols;
            acc(*table, &mut |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        gt[id * cols + j] += g[r * cols + j];
                    }
                }
            });
        }
        Op::Row { x, index, cols } => {
            let (index, cols) = (*index, *cols);
            acc(*x, &mut |gx| {
                for j in 0..cols {
                    gx[index * cols + j] += g[j];
                }
            });
        }
        Op::Stack(xs) => {
            for (i, &x) in xs.iter().enumerate() {
                acc(x, &mut |gx| gx[0] += g[i]);
            }
        }
        Op::CrossEntropy { logits, targets, cols } => {
            let cols = *cols;
            let lv = val(*logits);
            acc(*logits, &mut |gl| {
                for (r, &t) in targets.iter().enumerate() {
                    let p = softmax_slice(&lv[r * cols..(r + 1) * cols]);
                    for j in 0..cols {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * cols + j] += g[0] * (p[j] - onehot);
                    }
                }
            });
        }
        Op::Custom { inputs, backward } => {
            let gs = backward(g);
            for (&x, gx_in) in inputs.iter().zip(gs) {
                acc(x, &mut |gx| gx.iter_mut().zip(&gx_in).for_each(|(o, v)| *o += v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(&*tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), vec![1, 1]);
        assert_eq!(tape.scalar(c), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn add_concat_basics() {
        let tape = Tape::new();
        let a = tape.constant_vec(vec![1.0, 2.0]);
        let z = tape.constant_vec(vec![0.0, 0.0]);
        let s = tape.add(a, z).unwrap();
        assert_eq!(&*tape.value(s), &[1.0, 2.0]);
        let b = tape.constant_vec(vec![3.0]);
        let c = tape.concat(a, b).unwrap();
        assert_eq!(&*tape.value(c), &[1.0, 2.0, 3.0]);
        assert!(tape.add(a, b).is_err());

        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let bias = tape.constant_vec(vec![10.0, 20.0]);
        let r = tape.add(m, bias).unwrap();
        assert_eq!(&*tape.value(r), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn concat_routes_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let b = tape.leaf(&Tensor::from_vec(vec![3.0]).unwrap().with_requires_grad(true));
        let c = tape.concat(a, b).unwrap();
        let w = tape.constant_vec(vec![5.0, 6.0, 7.0]);
        let loss = tape.mul(c, w).and_then(|p| tape.sum(p)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[5.0, 6.0]);
        assert_eq!(g.get(b).unwrap(), &[7.0]);
    }

    #[test]
    fn activations() {
        let tape = Tape::new();
        let z = tape.constant_vec(vec![0.0]);
        assert_eq!(tape.scalar(tape.sigmoid(z).unwrap()), 0.5);
        let x = tape.constant_vec(vec![-1.0, 2.0]);
        assert_eq!(&*tape.value(tape.relu(x).unwrap()), &[0.0, 2.0]);
        let big = tape.constant_vec(vec![-800.0, 800.0]);
        let s = tape.sigmoid(big).unwrap();
        assert!(tape.value(s).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![0.0, 1.0]).unwrap().with_requires_grad(true));
        let loss = tape.relu(x).and_then(|r| tape.sum(r)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_values() {
        let p = softmax_slice(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_slice(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
        // e^x / sum e^x evaluated directly, no max shift needed at this scale
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let p = softmax_slice(&[1.0, 2.0, 3.0]);
        for ((a, b), reference) in p.iter().zip(&direct).zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-15);
            assert!((a - reference).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_values() {
        assert_eq!(cosine_slice(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine_slice(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_slice(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_slice(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn cosine_zero_norm_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![0.0, 0.0]).unwrap().with_requires_grad(true));
        let b = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let c = tape.cosine(a, b).unwrap();
        let g = tape.backward(c).unwrap();
        assert!(g.get(a).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        assert!(g.get(b).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_sum_and_accumulation() {
        let mut x = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true);
        let tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum(xv).unwrap();
        let g1 = tape.backward(loss).unwrap();
        g1.write_into(xv, &mut x).unwrap();
        assert_eq!(x.grad().unwrap(), &[1.0, 1.0, 1.0]);
        let g2 = tape.backward(loss).unwrap();
        g2.write_into(xv, &mut x).unwrap();
        assert_eq!(x.grad().unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
        let other = Tape::new();
        let y = other.constant_vec(vec![1.0]);
        let _ = other.constant_vec(vec![1.0]);
        let far = other.sum(y).and_then(|s| other.sum(s)).unwrap();
        assert!(matches!(tape.backward(far), Err(Error::NotOnTape(_))));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut t = Tensor::zeros(&[2]);
        assert!(matches!(g.write_into(Var(99), &mut t), Err(Error::NotOnTape(99))));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let x = tape.leaf(&Tensor::from_vec(vec![3.0, 4.0]).unwrap().with_requires_grad(true));
        let loss = tape.mul(w, x).and_then(|p| tape.sum(p)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_scatters_only_used_rows() {
        let tape = Tape::new();
        let table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().with_requires_grad(true);
        let tv = tape.leaf(&table);
        let rows = tape.gather_rows(tv, &[2, 0, 2]).unwrap();
        let mean = tape.mean_rows(rows).unwrap();
        assert_eq!(&*tape.value(mean), &[11.0 / 3.0, 14.0 / 3.0]);
        let loss = tape.sum(mean).unwrap();
        let g = tape.backward(loss).unwrap();
        let gt = g.get(tv).unwrap();
        assert_eq!(&gt[2..4], &[0.0, 0.0]);
        assert!((gt[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((gt[4] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_formula() {
        let tape = Tape::new();
        let l = tape.constant_vec(vec![10.0, -10.0]);
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        let expected = (-20.0f64).exp().ln_1p();
        assert!((tape.scalar(ce) - expected).abs() < 1e-24);
        assert!((tape.scalar(ce) - 2.06e-9).abs() < 1e-11);
        assert!(tape.cross_entropy(l, &[2]).is_err());
    }
}
