//! JSON run configuration with one section per stage.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "train": { "lambda": 0.01, "temperature": 0.5, "epochs": 20 },
//!   "arch": { "embed_dim": 128 },
//!   "condense": { "max_iters": 500 },
//!   "mine": { "radius": 3 },
//!   "io": { "selectors": "persistent,k10" }
//! }
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condense::CondenseConfig;
use crate::encoder::ArchSpec;
use crate::mining::MiningConfig;
use crate::objective::TrainConfig;
use crate::pipeline::{parse_selectors, Selector};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Comma-separated selectors used when `--selectors` is absent.
    pub selectors: String,
    /// Cluster count for the k-means baseline in sweeps.
    pub kmeans_k: usize,
    /// Resize every input to `[height, width]` before use.
    pub resize: Option<[usize; 2]>,
    /// Held-out synthetic images generated when a sweep has no `--heldout` dir.
    pub heldout_images: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self { selectors: "persistent,k10".into(), kmeans_k: 10, resize: None, heldout_images: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub arch: ArchSpec,
    pub condense: CondenseConfig,
    pub mine: MiningConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.arch.validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.condense.validate().map_err(|e| invalid(&e))?;
        if self.mine.radius == 0 {
            return Err(ConfigError::Invalid("mine.radius must be at least 1".into()));
        }
        if self.io.kmeans_k == 0 {
            return Err(ConfigError::Invalid("io.kmeans_k must be at least 1".into()));
        }
        if let Some([h, w]) = self.io.resize {
            if h == 0 || w == 0 {
                return Err(ConfigError::Invalid("io.resize has a zero dimension".into()));
            }
        }
        self.selectors().map(|_| ())
    }

    pub fn selectors(&self) -> Result<Vec<Selector>, ConfigError> {
        parse_selectors(&self.io.selectors).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Training settings with the mining section and seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { mining: self.mine.clone(), seed: self.seed, ..self.train.clone() }
    }

    pub fn condense_config(&self) -> CondenseConfig {
        CondenseConfig { seed: self.seed, ..self.condense.clone() }
    }
}
