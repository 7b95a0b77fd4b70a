//! Exact cosine retrieval over knowledge embeddings and negative sampling.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::index;

use crate::error::{shape_err, Error, Result};
use crate::rng::{mix_seed, Xoshiro256};
use crate::tape::cosine_slice;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub node_index: usize,
    pub similarity: f64,
    pub embedding: Tensor,
}

/// Ranking key: higher similarity first, lower index on ties.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f64,
    index: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    /// `Greater` means ranked earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_inputs(query: &[f64], knowledge: &Tensor) -> Result<()> {
    if knowledge.shape().len() != 2 {
        return Err(shape_err("retrieve", format!("knowledge must be rank 2, got {:?}", knowledge.shape())));
    }
    if knowledge.cols() != query.len() {
        return Err(shape_err(
            "retrieve",
            format!("query width {} vs embedding width {}", query.len(), knowledge.cols()),
        ));
    }
    Ok(())
}

fn result_for(knowledge: &Tensor, s: Scored) -> RetrievalResult {
    RetrievalResult {
        node_index: s.index,
        similarity: s.sim,
        embedding: Tensor::from_vec(knowledge.row(s.index).to_vec()).expect("finite row"),
    }
}

/// Index and similarity of the best row; first index wins ties.
pub fn argmax_cosine(query: &[f64], knowledge: &Tensor) -> Result<(usize, f64)> {
    check_inputs(query, knowledge)?;
    let mut best = Scored { sim: f64::NEG_INFINITY, index: 0 };
    for i in 0..knowledge.rows() {
        let s = Scored { sim: cosine_slice(query, knowledge.row(i)), index: i };
        if s > best {
            best = s;
        }
    }
    Ok((best.index, best.sim))
}

pub fn retrieve_top1(query: &[f64], knowledge: &Tensor) -> Result<RetrievalResult> {
    let (index, sim) = argmax_cosine(query, knowledge)?;
    Ok(result_for(knowledge, Scored { sim, index }))
}

/// The `k` best rows by (similarity desc, index asc), found with a bounded
/// min-heap of size `k`.
pub fn retrieve_topk(query: &[f64], knowledge: &Tensor, k: usize) -> Result<Vec<RetrievalResult>> {
    check_inputs(query, knowledge)?;
    let n = knowledge.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={n}")));
    }
    let mut heap: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::with_capacity(k + 1);
    for i in 0..n {
        let s = Scored { sim: cosine_slice(query, knowledge.row(i)), index: i };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(s));
        } else if heap.peek().is_some_and(|w| s > w.0) {
            heap.pop();
            heap.push(std::cmp::Reverse(s));
        }
    }
    // ascending Reverse order == descending rank order
    let ranked: Vec<Scored> = heap.into_sorted_vec().into_iter().map(|r| r.0).collect();
    Ok(ranked.into_iter().map(|s| result_for(knowledge, s)).collect())
}

/// `count` distinct indices from `0..n_nodes` excluding `positive`, uniform
/// without replacement, fully determined by `seed`.
pub fn sample_negatives(positive: usize, n_nodes: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if positive >= n_nodes {
        return Err(Error::InvalidArgument(format!("positive index {positive} out of range 0..{n_nodes}")));
    }
    if count > n_nodes - 1 {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} negatives from {} candidates",
            n_nodes - 1
        )));
    }
    let mut rng = Xoshiro256::seed_from(seed);
    Ok(index::sample(&mut rng, n_nodes - 1, count)
        .into_iter()
        .map(|i| if i >= positive { i + 1 } else { i })
        .collect())
}

/// Per-run negative sampler: each draw uses `(seed, step)` and advances `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeSampler {
    pub seed: u64,
    pub step: u64,
}

impl NegativeSampler {
    pub fn new(seed: u64) -> Self {
        Self { seed, step: 0 }
    }

    pub fn draw(&mut self, positive: usize, n_nodes: usize, count: usize) -> Result<Vec<usize>> {
        let out = sample_negatives(positive, n_nodes, count, mix_seed(self.seed, self.step))?;
        self.step += 1;
        Ok(out)
    }
}
