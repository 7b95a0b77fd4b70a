//! Knowledge-guided multimodal pretraining at desk scale.
//!
//! A small reverse-mode autodiff core drives toy visual/text encoders, a
//! two-layer graph encoder over a knowledge graph, cosine retrieval, gated
//! fusion and a task adaptor. Training runs in two stages (contrastive
//! alignment, then fine-tuning under a freeze policy), and a synthetic
//! benchmark measures what each component contributes.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod gradcheck;
pub mod gradsuite;
pub mod kg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::{parse_config, TrainConfig};
pub use error::{CheckpointError, Error, Result};
pub use kg::{build_graph, parse_triples, KnowledgeGraph, Triple};
pub use tape::{Tape, Var};
pub use tensor::{Init, Tensor};
pub use trainer::Trainer;
