//! Run configuration. Files are TOML; every key is optional and unknown keys
//! are rejected. Defaults reproduce the reference training setup: 2 local
//! epochs, batch 32, Adam at 1e-3 without weight decay, gamma = 5, mu = 0.01
//! and 20 rounds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::ClassifierRule;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{Activation, AdamConfig, Architecture};
use crate::orchestration::Method;

/// Environment variable that overrides `output_dir` (a CLI `--out` still wins).
pub const OUTPUT_ROOT_ENV: &str = "FEDC2I_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub clients: usize,
    pub classes: usize,
    /// Influence temperature.
    pub gamma: f64,
    /// FedProx proximal weight.
    pub mu: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Aggregate the classifier with the printed (no-op) row index.
    pub literal_eq10: bool,
    /// Reset Adam moments at the start of every round instead of keeping them.
    pub reset_optimizer: bool,
    pub activation: Activation,
    /// Widths of the representation layers; the last one is the classifier input width.
    pub hidden: Vec<usize>,
    /// Worker threads for client updates within a round.
    pub threads: usize,
    /// Write per-round checkpoints under `<run dir>/checkpoints`.
    pub checkpoint: bool,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::FedC2I,
            clients: 5,
            classes: 10,
            gamma: 5.0,
            mu: 0.01,
            rounds: 20,
            local_epochs: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            literal_eq10: false,
            reset_optimizer: false,
            activation: Activation::Tanh,
            hidden: vec![64, 32],
            threads: 1,
            checkpoint: false,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Effective configuration, re-parseable by [`from_toml_str`](Self::from_toml_str).
    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("classes", self.classes),
            ("batch_size", self.batch_size),
            ("threads", self.threads),
        ];
        for (key, v) in positive {
            if v < 1 {
                return Err(Error::config(format!("{key} must be >= 1 (got {v})")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config(format!(
                "gamma must be >= 0 (got {})",
                self.gamma
            )));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::config(format!("mu must be >= 0 (got {})", self.mu)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be > 0 (got {})",
                self.learning_rate
            )));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{key} must be in [0, 1) (got {v})")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(format!(
                "epsilon must be > 0 (got {})",
                self.epsilon
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be >= 1"));
        }
        self.data.validate(self.clients, self.classes)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.data.feature_dim,
            hidden: self.hidden.clone(),
            classes: self.classes,
            activation: self.activation,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn classifier_rule(&self) -> ClassifierRule {
        if self.literal_eq10 {
            ClassifierRule::Literal
        } else {
            ClassifierRule::Corrected
        }
    }

    /// Output root after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}
