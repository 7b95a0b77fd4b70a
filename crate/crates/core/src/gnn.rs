//! Two-layer message-passing encoder over the row-normalized adjacency.

use crate::error::Result;
use crate::kg::KnowledgeGraph;
use crate::tape::{Tape, Var};
use crate::tensor::{Init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GnnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GnnParams {
    /// Xavier weights and zero biases for `d_k -> d_h -> d_e`.
    pub fn new(d_k: usize, d_h: usize, d_e: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            w1: Tensor::create(&[d_k, d_h], Init::Xavier { seed })?,
            b1: Tensor::create(&[d_h], Init::Zeros)?,
            w2: Tensor::create(&[d_h, d_e], Init::Xavier { seed: seed.wrapping_add(1) })?,
            b2: Tensor::create(&[d_e], Init::Zeros)?,
        })
    }

    pub fn bind(&self, tape: &Tape) -> GnnVars {
        GnnVars { w1: tape.leaf(&self.w1), b1: tape.leaf(&self.b1), w2: tape.leaf(&self.w2), b2: tape.leaf(&self.b2) }
    }
}

/// `activation(A · H · W + b)` with the bias broadcast over rows.
pub fn gnn_layer(tape: &Tape, adjacency: Var, h: Var, w: Var, b: Var, activation: Activation) -> Result<Var> {
    let propagated = tape.matmul(adjacency, h)?;
    let projected = tape.matmul(propagated, w)?;
    let pre = tape.add(projected, b)?;
    match activation {
        Activation::Identity => Ok(pre),
        Activation::Relu => tape.relu(pre),
    }
}

/// Knowledge embeddings, one row per node: relu hidden layer, linear output.
pub fn encode_knowledge_on(tape: &Tape, adjacency: Var, features: Var, p: &GnnVars) -> Result<Var> {
    let hidden = gnn_layer(tape, adjacency, features, p.w1, p.b1, Activation::Relu)?;
    gnn_layer(tape, adjacency, hidden, p.w2, p.b2, Activation::Identity)
}

/// Evaluates the encoder on the graph's own features, without gradients.
pub fn encode_knowledge(g: &KnowledgeGraph, p: &GnnParams) -> Result<Tensor> {
    encode_with_features(&g.adjacency, &g.features, p)
}

pub fn encode_with_features(adjacency: &Tensor, features: &Tensor, p: &GnnParams) -> Result<Tensor> {
    let tape = Tape::new();
    let a = tape.constant(adjacency.clone());
    let x = tape.constant(features.clone());
    let vars = GnnVars {
        w1: tape.constant(p.w1.clone()),
        b1: tape.constant(p.b1.clone()),
        w2: tape.constant(p.w2.clone()),
        b2: tape.constant(p.b2.clone()),
    };
    let k = encode_knowledge_on(&tape, a, x, &vars)?;
    Ok(tape.to_tensor(k))
}
