//! Run configuration. Every hyperparameter has a default; JSON files may
//! override any subset and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FreezePolicy, GateMode, Group};
use crate::losses::{Denominator, LossConfig};
use crate::synth::WorldConfig;

/// Which knowledge vector reaches the task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    /// A zero vector; the knowledge path is absent.
    None,
    /// The mean of all node embeddings.
    MeanPool,
    /// The top-1 cosine match.
    #[default]
    Retrieve,
}

/// Source of the contrastive positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSource {
    /// The example's annotated node, falling back to the retrieved one.
    #[default]
    GoldNode,
    Retrieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub n_examples: usize,
    pub n_pretrain_examples: usize,
    pub test_fraction: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], n_examples: 2000, n_pretrain_examples: 1000, test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d_i: usize,
    pub d_t: usize,
    pub d_m: usize,
    /// Knowledge embedding width; must equal `d_m`.
    pub d_e: usize,
    pub d_k: usize,
    pub d_h: usize,
    pub d_a: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_negatives: usize,
    pub denominator: Denominator,
    /// Groups frozen during fine-tuning.
    pub freeze: Vec<Group>,
    pub gate: GateMode,
    pub use_gate: bool,
    pub knowledge: KnowledgeMode,
    pub positive_source: PositiveSource,
    pub world: WorldConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_i: 16,
            d_t: 16,
            d_m: 16,
            d_e: 16,
            d_k: 16,
            d_h: 32,
            d_a: 8,
            vocab_size: 32,
            n_classes: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_epochs: 10,
            finetune_epochs: 10,
            batch_size: 16,
            seed: 0,
            tau: 0.07,
            lambda1: 1.0,
            lambda2: 1.0,
            n_negatives: 8,
            denominator: Denominator::Standard,
            freeze: vec![Group::ThetaV, Group::ThetaT, Group::ThetaM, Group::ThetaK],
            gate: GateMode::Literal,
            use_gate: true,
            knowledge: KnowledgeMode::Retrieve,
            positive_source: PositiveSource::GoldNode,
            world: WorldConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn cfg_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            n_negatives: self.n_negatives,
            denominator: self.denominator,
        }
    }

    pub fn finetune_policy(&self) -> FreezePolicy {
        FreezePolicy::from_frozen(&self.freeze)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_i", self.d_i),
            ("d_t", self.d_t),
            ("d_m", self.d_m),
            ("d_e", self.d_e),
            ("d_k", self.d_k),
            ("d_h", self.d_h),
            ("d_a", self.d_a),
            ("n_classes", self.n_classes),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(cfg_err(key, "must be >= 1"));
            }
        }
        if self.d_e != self.d_m {
            return Err(cfg_err("d_e", format!("must equal d_m ({}), got {}", self.d_m, self.d_e)));
        }
        if self.vocab_size < 2 {
            return Err(cfg_err("vocab_size", "must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("lr", format!("must be > 0, got {}", self.lr)));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(cfg_err(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(cfg_err("adam_eps", "must be > 0"));
        }
        self.loss().validate()?;
        self.finetune_policy()
            .validate()
            .map_err(|_| cfg_err("freeze", "cannot freeze every group"))?;
        self.world.validate()?;
        let a = &self.ablation;
        if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
            return Err(cfg_err("ablation.test_fraction", "must lie in (0, 1)"));
        }
        if a.n_examples == 0 {
            return Err(cfg_err("ablation.n_examples", "must be >= 1"));
        }
        Ok(())
    }

    /// Checks that the synthetic world fits the model dimensions.
    pub fn validate_world(&self) -> Result<()> {
        if self.world.n_attributes != self.n_classes {
            return Err(cfg_err(
                "world.n_attributes",
                format!("must equal n_classes ({}), got {}", self.n_classes, self.world.n_attributes),
            ));
        }
        let needed = crate::synth::TEMPLATE_WORDS.len() + self.world.n_entities;
        if self.vocab_size < needed {
            return Err(cfg_err("vocab_size", format!("world needs at least {needed} tokens")));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let key = if path == "." { "<root>".to_string() } else { path };
            cfg_err(&key, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Reads, defaults and validates a JSON config file.
pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    TrainConfig::from_json_str(&text)
}
