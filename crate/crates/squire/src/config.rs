//! Model architecture and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Transformer encoder sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Positional-table length; 0 means derive from `max_hops` at build.
    pub max_seq_len: usize,
    /// Token count V; 0 means fill from the dataset vocabulary.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            d_model: 256,
            ff_dim: 512,
            heads: 4,
            dropout: 0.1,
            activation: Activation::Relu,
            max_seq_len: 0,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    /// Positions needed for the query plus a path of ≤ `max_hops` hops and
    /// the closing `<eos>`.
    pub fn seq_len_for(max_hops: usize) -> usize {
        2 + 2 * max_hops + 1
    }

    pub fn resolved(mut self, vocab_size: usize, max_hops: usize) -> Self {
        if self.vocab_size == 0 {
            self.vocab_size = vocab_size;
        }
        if self.max_seq_len == 0 {
            self.max_seq_len = Self::seq_len_for(max_hops);
        }
        self
    }

    fn problems(&self, max_hops: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.layers == 0 {
            out.push("layers must be ≥ 1".into());
        }
        if self.d_model == 0 || self.heads == 0 {
            out.push("d_model and heads must be ≥ 1".into());
        } else if self.d_model % self.heads != 0 {
            out.push(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ff_dim == 0 {
            out.push("ff_dim must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.vocab_size < 4 {
            out.push("vocab_size must cover at least one entity plus specials".into());
        }
        if self.max_seq_len < Self::seq_len_for(max_hops) {
            out.push(format!(
                "max_seq_len {} < required {} for {} hops",
                self.max_seq_len,
                Self::seq_len_for(max_hops),
                max_hops
            ));
        }
        out
    }
}

/// Everything the training pipeline needs beyond the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Label-smoothing ε: probability mass placed on the target token.
    pub label_smoothing: f64,
    /// Entity-token mask probability p.
    pub mask_prob: f64,
    /// Warmup fraction α of total optimization steps.
    pub warmup_ratio: f64,
    /// Epochs n for the first iteration; aggregation round k trains ⌈n/k⌉.
    pub epochs: usize,
    /// Maximum path hops N.
    pub max_hops: usize,
    /// Training pairs m per directed triple.
    pub pairs_per_triple: usize,
    pub batch_size: usize,
    /// Beam width for evaluation-time path generation.
    pub beam_size: usize,
    /// Golden-rule confidence threshold (strict lower bound).
    pub rule_threshold: f64,
    /// Run the iterative data-aggregation rounds.
    pub iterative: bool,
    pub seed: u64,
    /// Steps between validation-MRR log points; absent disables them.
    pub valid_every: Option<usize>,
    /// Beam width for the periodic validation MRR.
    pub valid_beam: usize,
    /// Cap on validation queries per log point.
    pub valid_sample: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            label_smoothing: 0.25,
            mask_prob: 0.15,
            warmup_ratio: 1.0 / 3.0,
            epochs: 30,
            max_hops: 3,
            pairs_per_triple: 6,
            batch_size: 64,
            beam_size: 256,
            rule_threshold: 0.0,
            iterative: true,
            seed: 0,
            valid_every: None,
            valid_beam: 16,
            valid_sample: Some(200),
        }
    }
}

impl TrainConfig {
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lr <= 0.0 {
            out.push(format!("lr {} must be positive", self.lr));
        }
        if !(self.label_smoothing > 0.0 && self.label_smoothing <= 1.0) {
            out.push(format!(
                "label_smoothing {} outside (0,1]",
                self.label_smoothing
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            out.push(format!("mask_prob {} outside [0,1]", self.mask_prob));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            out.push(format!("warmup_ratio {} outside (0,1)", self.warmup_ratio));
        }
        if self.max_hops == 0 {
            out.push("max_hops must be ≥ 1".into());
        }
        if self.pairs_per_triple == 0 {
            out.push("pairs_per_triple must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be ≥ 1".into());
        }
        if self.beam_size == 0 || self.valid_beam == 0 {
            out.push("beam sizes must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.rule_threshold) {
            out.push(format!(
                "rule_threshold {} outside [0,1]",
                self.rule_threshold
            ));
        }
        out
    }
}

/// Bundle serialized alongside every artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Collects every validation failure at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = self.train.problems();
        problems.extend(self.model.problems(self.train.max_hops));
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_once_resolved() {
        let mut cfg = RunConfig::default();
        cfg.model = cfg.model.resolved(13, cfg.train.max_hops);
        cfg.validate().unwrap();
        assert_eq!(cfg.model.max_seq_len, 9);
    }

    #[test]
    fn validation_reports_all_problems_at_once() {
        let mut cfg = RunConfig::default();
        cfg.model = cfg.model.resolved(13, 3);
        cfg.train.lr = -1.0;
        cfg.train.mask_prob = 2.0;
        cfg.model.heads = 3; // 256 % 3 != 0
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lr"), "{err}");
        assert!(err.contains("mask_prob"), "{err}");
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 17;
        cfg.train.valid_every = Some(50);
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }
}
