//! Parameter groups of the whole model and the per-example forward pipeline:
//! encoders, knowledge embeddings, retrieval, gate and task head.

use crate::config::{KnowledgeMode, TrainConfig};
use crate::encoders::{encode_example, AffineVars, EncoderVars, Example, FusionParams, TextParams, TextVars, VisualParams};
use crate::error::{Error, Result};
use crate::fusion::{adapt_task, gate_integrate, AdaptorParams, AdaptorVars, FreezePolicy, GateMode, GateParams, GateVars, Group};
use crate::gnn::{encode_knowledge_on, GnnParams, GnnVars};
use crate::kg::KnowledgeGraph;
use crate::losses::{loss_align, Denominator};
use crate::encoders::EncoderParams;
use crate::rng::mix_seed;
use crate::tape::{cosine_slice, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeParams {
    pub node_features: Tensor,
    pub gnn: GnnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta_v: VisualParams,
    pub theta_t: TextParams,
    pub theta_m: FusionParams,
    pub theta_k: KnowledgeParams,
    pub w_g: GateParams,
    pub theta_a: AdaptorParams,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub encoders: EncoderVars,
    pub node_features: Var,
    pub gnn: GnnVars,
    pub gate: GateVars,
    pub adaptor: AdaptorVars,
}

/// Number of tensors in [`ModelParams::tensors`].
pub const N_TENSORS: usize = 18;

impl ModelParams {
    /// Fresh parameters for `cfg`; node features start from the graph's own.
    pub fn new(cfg: &TrainConfig, graph: &KnowledgeGraph) -> Result<Self> {
        cfg.validate()?;
        if graph.feature_dim() != cfg.d_k {
            return Err(Error::Config {
                key: "d_k".into(),
                message: format!("graph features have width {}, config says {}", graph.feature_dim(), cfg.d_k),
            });
        }
        let seed = |salt: u64| mix_seed(cfg.seed, salt);
        let enc = EncoderParams::new(cfg.d_i, cfg.vocab_size, cfg.d_t, cfg.d_m, seed(10))?;
        let mut params = Self {
            theta_v: enc.visual,
            theta_t: enc.text,
            theta_m: enc.fusion,
            theta_k: KnowledgeParams {
                node_features: graph.features.clone(),
                gnn: GnnParams::new(cfg.d_k, cfg.d_h, cfg.d_e, seed(20))?,
            },
            w_g: GateParams::new(cfg.d_m, cfg.gate, seed(30))?,
            theta_a: AdaptorParams::new(cfg.d_m, cfg.d_a, cfg.n_classes, seed(40))?,
        };
        params.set_trainable(&FreezePolicy::all_trainable());
        Ok(params)
    }

    /// All tensors in a fixed order, with their names and groups.
    pub fn tensors(&self) -> [(&'static str, Group, &Tensor); N_TENSORS] {
        [
            ("theta_v.w", Group::ThetaV, &self.theta_v.w),
            ("theta_v.b", Group::ThetaV, &self.theta_v.b),
            ("theta_t.embed", Group::ThetaT, &self.theta_t.embed),
            ("theta_t.w", Group::ThetaT, &self.theta_t.w),
            ("theta_t.b", Group::ThetaT, &self.theta_t.b),
            ("theta_m.w", Group::ThetaM, &self.theta_m.w),
            ("theta_m.b", Group::ThetaM, &self.theta_m.b),
            ("theta_k.node_features", Group::ThetaK, &self.theta_k.node_features),
            ("theta_k.w1", Group::ThetaK, &self.theta_k.gnn.w1),
            ("theta_k.b1", Group::ThetaK, &self.theta_k.gnn.b1),
            ("theta_k.w2", Group::ThetaK, &self.theta_k.gnn.w2),
            ("theta_k.b2", Group::ThetaK, &self.theta_k.gnn.b2),
            ("w_g.w", Group::WG, &self.w_g.w),
            ("w_g.b", Group::WG, &self.w_g.b),
            ("theta_a.w1", Group::ThetaA, &self.theta_a.w1),
            ("theta_a.b1", Group::ThetaA, &self.theta_a.b1),
            ("theta_a.w_out", Group::ThetaA, &self.theta_a.w_out),
            ("theta_a.b_out", Group::ThetaA, &self.theta_a.b_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, Group, &mut Tensor); N_TENSORS] {
        [
            ("theta_v.w", Group::ThetaV, &mut self.theta_v.w),
            ("theta_v.b", Group::ThetaV, &mut self.theta_v.b),
            ("theta_t.embed", Group::ThetaT, &mut self.theta_t.embed),
            ("theta_t.w", Group::ThetaT, &mut self.theta_t.w),
            ("theta_t.b", Group::ThetaT, &mut self.theta_t.b),
            ("theta_m.w", Group::ThetaM, &mut self.theta_m.w),
            ("theta_m.b", Group::ThetaM, &mut self.theta_m.b),
            ("theta_k.node_features", Group::ThetaK, &mut self.theta_k.node_features),
            ("theta_k.w1", Group::ThetaK, &mut self.theta_k.gnn.w1),
            ("theta_k.b1", Group::ThetaK, &mut self.theta_k.gnn.b1),
            ("theta_k.w2", Group::ThetaK, &mut self.theta_k.gnn.w2),
            ("theta_k.b2", Group::ThetaK, &mut self.theta_k.gnn.b2),
            ("w_g.w", Group::WG, &mut self.w_g.w),
            ("w_g.b", Group::WG, &mut self.w_g.b),
            ("theta_a.w1", Group::ThetaA, &mut self.theta_a.w1),
            ("theta_a.b1", Group::ThetaA, &mut self.theta_a.b1),
            ("theta_a.w_out", Group::ThetaA, &mut self.theta_a.w_out),
            ("theta_a.b_out", Group::ThetaA, &mut self.theta_a.b_out),
        ]
    }

    pub fn set_trainable(&mut self, policy: &FreezePolicy) {
        for (_, group, t) in self.tensors_mut() {
            t.set_requires_grad(policy.trainable(group));
        }
    }

    /// Current trainability, read back from the tensors.
    pub fn policy(&self) -> FreezePolicy {
        let mut p = FreezePolicy::from_frozen(&Group::ALL);
        for (_, group, t) in self.tensors() {
            if t.requires_grad() {
                p.set(group, true);
            }
        }
        p
    }

    pub fn group_param_count(&self, group: Group) -> usize {
        self.tensors().iter().filter(|(_, g, _)| *g == group).map(|(_, _, t)| t.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Records every tensor on the tape; only trainable ones are tracked.
    pub fn bind(&self, tape: &Tape) -> ModelVars {
        let vars: Vec<Var> = self.tensors().iter().map(|(_, _, t)| tape.leaf(t)).collect();
        self.vars_from(&vars)
    }

    /// Assembles [`ModelVars`] from one var per tensor, in [`Self::tensors`] order.
    pub fn vars_from(&self, v: &[Var]) -> ModelVars {
        assert_eq!(v.len(), N_TENSORS, "one var per tensor");
        ModelVars {
            encoders: EncoderVars {
                visual: AffineVars { w: v[0], b: v[1] },
                text: TextVars { embed: v[2], w: v[3], b: v[4] },
                fusion: AffineVars { w: v[5], b: v[6] },
            },
            node_features: v[7],
            gnn: GnnVars { w1: v[8], b1: v[9], w2: v[10], b2: v[11] },
            gate: GateVars { w: v[12], b: v[13], mode: self.w_g.mode },
            adaptor: AdaptorVars { w1: v[14], b1: v[15], w_out: v[16], b_out: v[17] },
        }
    }

    /// Writes tape gradients into the grad slots of trainable tensors.
    pub fn accumulate_grads(&mut self, grads: &crate::tape::Gradients, vars: &ModelVars) -> Result<()> {
        let order = [
            vars.encoders.visual.w,
            vars.encoders.visual.b,
            vars.encoders.text.embed,
            vars.encoders.text.w,
            vars.encoders.text.b,
            vars.encoders.fusion.w,
            vars.encoders.fusion.b,
            vars.node_features,
            vars.gnn.w1,
            vars.gnn.b1,
            vars.gnn.w2,
            vars.gnn.b2,
            vars.gate.w,
            vars.gate.b,
            vars.adaptor.w1,
            vars.adaptor.b1,
            vars.adaptor.w_out,
            vars.adaptor.b_out,
        ];
        for ((_, _, t), v) in self.tensors_mut().into_iter().zip(order) {
            if t.requires_grad() {
                grads.write_into(v, t)?;
            }
        }
        Ok(())
    }

    pub fn gate_mode(&self) -> GateMode {
        self.w_g.mode
    }

    /// Knowledge embeddings for the current parameters, without gradients.
    pub fn knowledge_embeddings(&self, graph: &KnowledgeGraph) -> Result<Tensor> {
        crate::gnn::encode_with_features(&graph.adjacency, &self.theta_k.node_features, &self.theta_k.gnn)
    }
}

/// How the task head consumes knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    pub knowledge: KnowledgeMode,
    pub use_gate: bool,
}

impl PipelineOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { knowledge: cfg.knowledge, use_gate: cfg.use_gate }
    }
}

/// Knowledge matrix recorded on a tape, with its values for retrieval scans.
pub struct KnowledgeOnTape {
    pub var: Var,
    pub values: Tensor,
}

impl KnowledgeOnTape {
    /// Runs the GNN on the tape (tracked iff its parameters are).
    pub fn encode(tape: &Tape, adjacency: Var, vars: &ModelVars) -> Result<Self> {
        let var = encode_knowledge_on(tape, adjacency, vars.node_features, &vars.gnn)?;
        Ok(Self { var, values: tape.to_tensor(var) })
    }

    /// Records precomputed embeddings as a constant.
    pub fn cached(tape: &Tape, k: &Tensor) -> Self {
        Self { var: tape.constant(k.clone()), values: k.clone() }
    }

    pub fn n_nodes(&self) -> usize {
        self.values.rows()
    }

    /// Top-1 row for `query` by cosine, first index on ties.
    pub fn best_match(&self, query: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..self.values.rows() {
            let s = cosine_slice(query, self.values.row(i));
            if s > best.1 {
                best = (i, s);
            }
        }
        best
    }
}

pub struct ExampleForward {
    pub m: Var,
    pub k_star: Var,
    pub logits: Var,
    /// Top-1 match of `m`, whenever knowledge embeddings are available.
    pub retrieved: Option<(usize, f64)>,
}

/// Encoders, knowledge selection, optional gate and task head for one example.
pub fn forward_example(
    tape: &Tape,
    vars: &ModelVars,
    knowledge: Option<&KnowledgeOnTape>,
    example: &Example,
    opts: PipelineOptions,
) -> Result<ExampleForward> {
    let m = encode_example(tape, example, &vars.encoders)?;
    let m_values = tape.value(m).to_vec();
    let retrieved = match knowledge {
        Some(k) => {
            if m_values.len() != k.values.cols() {
                return Err(Error::Shape {
                    op: "retrieve",
                    detail: format!("m has width {}, knowledge rows have {}", m_values.len(), k.values.cols()),
                });
            }
            Some(k.best_match(&m_values))
        }
        None => None,
    };
    let k_star = match (opts.knowledge, knowledge, retrieved) {
        (KnowledgeMode::None, _, _) => tape.constant_vec(vec![0.0; m_values.len()]),
        (KnowledgeMode::MeanPool, Some(k), _) => tape.mean_rows(k.var)?,
        // the argmax is a hard choice; gradient reaches only the chosen row
        (KnowledgeMode::Retrieve, Some(k), Some((i, _))) => tape.row(k.var, i)?,
        _ => return Err(Error::InvalidArgument("knowledge mode needs knowledge embeddings".into())),
    };
    let m_prime = if opts.use_gate { gate_integrate(tape, m, k_star, &vars.gate)? } else { m };
    let logits = adapt_task(tape, m_prime, k_star, &vars.adaptor)?;
    Ok(ExampleForward { m, k_star, logits, retrieved })
}

/// Contrastive alignment of `m` against a positive row and negative rows of the knowledge matrix.
pub fn alignment_term(
    tape: &Tape,
    m: Var,
    knowledge: &KnowledgeOnTape,
    positive: usize,
    negatives: &[usize],
    tau: f64,
    denominator: Denominator,
) -> Result<Var> {
    let k_pos = tape.row(knowledge.var, positive)?;
    let k_negs = negatives.iter().map(|&j| tape.row(knowledge.var, j)).collect::<Result<Vec<_>>>()?;
    loss_align(tape, m, k_pos, &k_negs, tau, denominator)
}
