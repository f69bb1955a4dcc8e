//! Experiment configuration: strict JSON parsing (unknown fields rejected),
//! range validation with field-level messages, and a stable content hash.

use crate::al::{AcquisitionConfig, AlWeights};
use crate::datagen::SynthSpec;
use crate::distill::KdWeights;
use crate::error::{Result, XmodalError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// width of every hidden layer; must match across encoder and heads so
    /// intermediate features can cross between networks
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    /// teacher-head layer receiving the student feature, in [0, 3)
    #[serde(default = "default_injection")]
    pub injection_layer: usize,
}

fn default_hidden() -> usize {
    16
}
fn default_embed() -> usize {
    8
}
fn default_injection() -> usize {
    1
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: default_hidden(),
            embed_dim: default_embed(),
            injection_layer: default_injection(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdSection {
    pub weights: KdWeights,
    /// similarity sharpness, > 0; typical range [1, 50]
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// evidence temperature, > 0; typical range (0, 10]
    #[serde(default = "default_tau")]
    pub tau_temp: f64,
    /// uncertainty-target scale, in [0, 1] in practice
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_momentum")]
    pub proto_momentum: f64,
    #[serde(default = "default_cer_bins")]
    pub cer_proto_bins: usize,
}

fn default_beta() -> f64 {
    10.0
}
fn default_tau() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_cer_bins() -> usize {
    4
}

impl Default for KdSection {
    fn default() -> Self {
        KdSection {
            weights: KdWeights::all_ones(),
            beta: default_beta(),
            tau_temp: default_tau(),
            delta: default_delta(),
            proto_momentum: default_momentum(),
            cer_proto_bins: default_cer_bins(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlSection {
    pub weights: AlWeights,
    pub acquisition: AcquisitionConfig,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_init_frac")]
    pub initial_labeled_fraction: f64,
    #[serde(default = "default_epr")]
    pub epochs_per_round: usize,
    #[serde(default)]
    pub reinit_each_round: bool,
    #[serde(default)]
    pub oracle_noise_rate: f64,
}

fn default_eps() -> f64 {
    1e-8
}
fn default_init_frac() -> f64 {
    0.1
}
fn default_epr() -> usize {
    30
}

impl Default for AlSection {
    fn default() -> Self {
        AlSection {
            weights: AlWeights::all_ones(),
            acquisition: AcquisitionConfig { ratio: 0.2, rounds: 5 },
            eps: default_eps(),
            initial_labeled_fraction: default_init_frac(),
            epochs_per_round: default_epr(),
            reinit_each_round: false,
            oracle_noise_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// initial learning rate, > 0; decays on a cosine schedule
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// early-stopping patience in epochs; 0 disables early stopping
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    10
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: default_lr(),
            epochs: default_epochs(),
            batch: default_batch(),
            patience: default_patience(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub kd: KdSection,
    #[serde(default)]
    pub al: AlSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![42]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SynthSpec::synth_3c(),
            model: ModelSection::default(),
            kd: KdSection::default(),
            al: AlSection::default(),
            optimizer: OptimizerSection::default(),
            seeds: default_seeds(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| XmodalError::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.kd.weights.validate()?;
        self.al.weights.validate()?;
        self.al.acquisition.validate()?;
        let m = &self.model;
        if m.hidden == 0 {
            return Err(XmodalError::config("model.hidden must be positive"));
        }
        if m.embed_dim == 0 {
            return Err(XmodalError::config("model.embed_dim must be positive"));
        }
        if m.injection_layer >= 3 {
            return Err(XmodalError::config("model.injection_layer must be in [0, 3)"));
        }
        if !(self.kd.beta > 0.0) {
            return Err(XmodalError::config("kd.beta must be positive"));
        }
        if !(self.kd.tau_temp > 0.0) {
            return Err(XmodalError::config("kd.tau_temp must be positive"));
        }
        if !self.kd.delta.is_finite() || self.kd.delta < 0.0 {
            return Err(XmodalError::config("kd.delta must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.kd.proto_momentum) {
            return Err(XmodalError::config("kd.proto_momentum must be in [0, 1]"));
        }
        if self.kd.cer_proto_bins < 2 {
            return Err(XmodalError::config("kd.cer_proto_bins must be at least 2"));
        }
        if !(self.al.eps > 0.0) {
            return Err(XmodalError::config("al.eps must be positive"));
        }
        if !(0.0 < self.al.initial_labeled_fraction && self.al.initial_labeled_fraction <= 1.0) {
            return Err(XmodalError::config("al.initial_labeled_fraction must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.al.oracle_noise_rate) {
            return Err(XmodalError::config("al.oracle_noise_rate must be in [0, 1]"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(XmodalError::config("optimizer.lr must be positive"));
        }
        if self.optimizer.epochs == 0 {
            return Err(XmodalError::config("optimizer.epochs must be positive"));
        }
        if self.optimizer.batch < 2 {
            return Err(XmodalError::config("optimizer.batch must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(XmodalError::config("seeds must be non-empty"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization; stable across runs
    /// because field order follows the struct declaration.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(cfg.content_hash(), back.content_hash());
    }

    #[test]
    fn unknown_field_rejected_with_name() {
        let json = r#"{"data": {"n": 10, "task": {"kind": "dec", "classes": 3}, "latent_dim": 2,
            "d_s": 4, "d_t": 4, "noise_s": 0.1, "noise_t": 0.1, "seed": 1},
            "bogus_field": 1}"#;
        let err = ExperimentConfig::from_json(json).unwrap_err();
        assert!(err.to_string().contains("bogus_field"), "{err}");
    }

    #[test]
    fn out_of_range_named_in_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.kd.beta = -1.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("kd.beta"), "{err}");
        let mut cfg2 = ExperimentConfig::default();
        cfg2.model.injection_layer = 7;
        assert!(cfg2.validate().unwrap_err().to_string().contains("injection_layer"));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.optimizer.lr = 2e-3;
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), ExperimentConfig::default().content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let json = r#"{"data": {"n": 30, "task": {"kind": "dec", "classes": 3}, "latent_dim": 2,
            "d_s": 4, "d_t": 4, "noise_s": 0.1, "noise_t": 0.1, "seed": 1}}"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(cfg.optimizer.batch, 32);
        assert_eq!(cfg.seeds, vec![42]);
    }
}
