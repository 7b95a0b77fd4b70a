//! Randomized finite-difference checks of every tape op and of the two
//! end-to-end objectives, shared by the CLI and the test suites.

use rand::Rng;

use crate::config::{KnowledgeMode, TrainConfig};
use crate::encoders::{encode_example, Example};
use crate::error::Result;
use crate::gradcheck::{fd_check_all, summarize, FdReport, DEFAULT_STEP, DEFAULT_TOL};
use crate::kg::{build_graph, KnowledgeGraph, Triple};
use crate::losses::{loss_cls, loss_total};
use crate::model::{alignment_term, forward_example, KnowledgeOnTape, ModelParams, PipelineOptions};
use crate::rng::{mix_seed, Xoshiro256};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Op names in the order [`op_suite`] reports them.
pub const OPS: [&str; 19] = [
    "matmul",
    "matvec",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "scale",
    "concat",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_row",
    "log_sum_exp",
    "cosine",
    "sum",
    "mean_rows",
    "gather_rows",
    "row_stack",
    "cross_entropy",
];

pub const PIPELINES: [&str; 2] = ["l_align", "l_total"];

fn random(rng: &mut Xoshiro256, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Values kept at least 0.05 away from zero, so `relu` has no kink within `h`.
fn away_from_zero(rng: &mut Xoshiro256, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 - *v } else { 0.05 + *v };
        }
    }
    t
}

fn sum_of<F>(f: F) -> impl Fn(&Tape, &[Var]) -> Result<Var>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    move |tape, v| {
        let y = f(tape, v)?;
        tape.sum(y)
    }
}

/// Weighted sum `Σ wᵢ yᵢ` so that every output element gets a distinct
/// upstream gradient.
fn weighted<F>(weights: Tensor, f: F) -> impl Fn(&Tape, &[Var]) -> Result<Var>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    move |tape, v| {
        let y = f(tape, v)?;
        let w = tape.constant(weights.reshape(tape.shape(y)).expect("weights sized to output"));
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }
}

fn check<F>(inputs: &[Tensor], f: F) -> Result<FdReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let reports = fd_check_all(inputs, f, DEFAULT_STEP, DEFAULT_TOL)?;
    Ok(summarize(reports).expect("at least one input"))
}

/// One report per entry of [`OPS`], each on fresh random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, FdReport)>> {
    let mut rng = Xoshiro256::seed_from(mix_seed(seed, 0x6a));
    let r = &mut rng;
    let mut out = Vec::with_capacity(OPS.len());
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));

    let a = random(r, &[m, k]);
    let b = random(r, &[k, n]);
    let w = random(r, &[m * n]);
    out.push(("matmul", check(&[a, b], weighted(w, |t, v| t.matmul(v[0], v[1])))?));

    let x = random(r, &[k]);
    let b = random(r, &[k, n]);
    let w = random(r, &[n]);
    out.push(("matvec", check(&[x, b], weighted(w, |t, v| t.matmul(v[0], v[1])))?));

    let (p, q) = (random(r, &[m, n]), random(r, &[m, n]));
    let w = random(r, &[m * n]);
    out.push(("add", check(&[p.clone(), q.clone()], weighted(w.clone(), |t, v| t.add(v[0], v[1])))?));

    let bias = random(r, &[n]);
    out.push(("add_broadcast", check(&[p.clone(), bias], weighted(w.clone(), |t, v| t.add(v[0], v[1])))?));
    out.push(("sub", check(&[p.clone(), q.clone()], weighted(w.clone(), |t, v| t.sub(v[0], v[1])))?));
    out.push(("mul", check(&[p.clone(), q.clone()], weighted(w.clone(), |t, v| t.mul(v[0], v[1])))?));
    let c: f64 = r.random_range(-3.0..3.0);
    out.push(("scale", check(&[p.clone()], weighted(w.clone(), move |t, v| t.scale(v[0], c)))?));

    let q2 = random(r, &[m, k]);
    let wc = random(r, &[m * (n + k)]);
    out.push(("concat", check(&[p.clone(), q2], weighted(wc, |t, v| t.concat(v[0], v[1])))?));

    let z = away_from_zero(r, &[m, n]);
    out.push(("relu", check(&[z], weighted(w.clone(), |t, v| t.relu(v[0])))?));
    out.push(("tanh", check(&[p.clone()], weighted(w.clone(), |t, v| t.tanh(v[0])))?));
    out.push(("sigmoid", check(&[p.clone()], weighted(w.clone(), |t, v| t.sigmoid(v[0])))?));

    let len = r.random_range(2..8);
    let row = random(r, &[len]);
    let wr = random(r, &[len]);
    out.push(("softmax_row", check(&[row.clone()], weighted(wr, |t, v| t.softmax_row(v[0])))?));
    out.push(("log_sum_exp", check(&[row.clone()], |t, v| t.log_sum_exp(v[0]))?));

    let (u, v2) = (random(r, &[len]), random(r, &[len]));
    out.push(("cosine", check(&[u, v2], |t, v| t.cosine(v[0], v[1]))?));

    out.push(("sum", check(&[p.clone()], sum_of(|t, v| t.tanh(v[0])))?));
    let wn = random(r, &[n]);
    out.push(("mean_rows", check(&[p.clone()], weighted(wn.clone(), |t, v| t.mean_rows(v[0])))?));

    let table = random(r, &[m + 2, n]);
    let ids: Vec<usize> = (0..4).map(|_| r.random_range(0..m + 2)).collect();
    let wg = random(r, &[ids.len() * n]);
    out.push(("gather_rows", check(&[table.clone()], weighted(wg, move |t, v| t.gather_rows(v[0], &ids)))?));

    let picks: Vec<usize> = (0..3).map(|_| r.random_range(0..m + 2)).collect();
    let ws = random(r, &[picks.len() * (n + 1)]);
    out.push((
        "row_stack",
        check(
            &[table],
            weighted(ws, move |t, v| {
                let rows = picks.iter().map(|&i| t.row(v[0], i)).collect::<Result<Vec<_>>>()?;
                let joined = rows[1..].iter().try_fold(rows[0], |acc, &r| t.concat(acc, r))?;
                let sums = rows.iter().map(|&r| t.sum(r)).collect::<Result<Vec<_>>>()?;
                let stacked = t.stack(&sums)?;
                let squared = t.mul(stacked, stacked)?;
                t.concat(joined, squared)
            }),
        )?,
    ));

    let logits = random(r, &[m, len]);
    let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..len)).collect();
    out.push(("cross_entropy", check(&[logits], move |t, v| t.cross_entropy(v[0], &targets))?));

    debug_assert_eq!(out.iter().map(|o| o.0).collect::<Vec<_>>(), OPS);
    Ok(out)
}

/// A five-node graph and tiny dimensions, small enough for exhaustive
/// per-parameter differences. A mild temperature keeps the contrastive
/// softmax unsaturated, so no gradient sinks below the difference noise.
pub fn pipeline_fixture(seed: u64) -> Result<(TrainConfig, KnowledgeGraph, ModelParams, Vec<Example>)> {
    let cfg = TrainConfig {
        d_i: 3,
        d_t: 3,
        d_m: 4,
        d_e: 4,
        d_k: 3,
        d_h: 4,
        d_a: 3,
        vocab_size: 6,
        n_classes: 3,
        tau: 0.5,
        seed,
        knowledge: KnowledgeMode::Retrieve,
        use_gate: true,
        ..Default::default()
    };
    let triples = [
        Triple::new("e0", "has_attribute", "a0"),
        Triple::new("e1", "has_attribute", "a1"),
        Triple::new("e2", "has_attribute", "a0"),
        Triple::new("e0", "related_to", "e2"),
    ];
    let graph = build_graph(&triples, cfg.d_k, mix_seed(seed, 1))?;
    let mut params = ModelParams::new(&cfg, &graph)?;
    // Default init plus noise: no tensor stays zero and no tanh saturates.
    let mut rng = Xoshiro256::seed_from(mix_seed(seed, 2));
    for (_, _, t) in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let examples = (0..2)
        .map(|i| Example {
            image_features: (0..cfg.d_i).map(|_| rng.random_range(-1.0..1.0)).collect(),
            token_ids: (0..3).map(|_| rng.random_range(0..cfg.vocab_size)).collect(),
            label: rng.random_range(0..cfg.n_classes),
            gold_node: Some(format!("e{i}")),
        })
        .collect();
    Ok((cfg, graph, params, examples))
}

/// Checks `L_align` and `L_total` with respect to every model tensor.
pub fn pipeline_suite(seed: u64) -> Result<Vec<(&'static str, FdReport)>> {
    let (cfg, graph, params, examples) = pipeline_fixture(seed)?;
    let tensors: Vec<Tensor> = params.tensors().iter().map(|(_, _, t)| (*t).clone()).collect();
    let adjacency = graph.adjacency.clone();
    let n = graph.n_nodes();
    let negatives = |pos: usize| -> Vec<usize> { (0..n).filter(|&j| j != pos).take(3).collect() };
    let gold = |ex: &Example| graph.index_of(ex.gold_node.as_deref().expect("fixture has gold nodes")).expect("known node");

    let align = |tape: &Tape, v: &[Var]| -> Result<Var> {
        let vars = params.vars_from(v);
        let adj = tape.constant(adjacency.clone());
        let k = KnowledgeOnTape::encode(tape, adj, &vars)?;
        let mut terms = Vec::new();
        for ex in &examples {
            let m = encode_example(tape, ex, &vars.encoders)?;
            let pos = gold(ex);
            terms.push(alignment_term(tape, m, &k, pos, &negatives(pos), cfg.tau, cfg.denominator)?);
        }
        let s = tape.stack(&terms)?;
        tape.sum(s)
    };
    let loss_cfg = crate::losses::LossConfig { lambda1: 0.7, lambda2: 1.3, ..cfg.loss() };
    let total = |tape: &Tape, v: &[Var]| -> Result<Var> {
        let vars = params.vars_from(v);
        let adj = tape.constant(adjacency.clone());
        let k = KnowledgeOnTape::encode(tape, adj, &vars)?;
        let mut terms = Vec::new();
        for ex in &examples {
            let fwd = forward_example(tape, &vars, Some(&k), ex, PipelineOptions::from_config(&cfg))?;
            let pos = gold(ex);
            let a = alignment_term(tape, fwd.m, &k, pos, &negatives(pos), cfg.tau, cfg.denominator)?;
            let task = loss_cls(tape, fwd.logits, ex.label)?;
            terms.push(loss_total(tape, a, task, &loss_cfg)?);
        }
        let s = tape.stack(&terms)?;
        tape.sum(s)
    };
    Ok(vec![("l_align", check(&tensors, align)?), ("l_total", check(&tensors, total)?)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_seeds_pass() {
        for seed in 0..3 {
            for (name, r) in op_suite(seed).unwrap().into_iter().chain(pipeline_suite(seed).unwrap()) {
                assert!(r.passed, "{name} seed {seed}: {r:?}");
            }
        }
    }
}
