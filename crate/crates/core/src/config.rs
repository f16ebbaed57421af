//! Run configuration file (TOML). Unknown keys are rejected; every field has
//! a default, so an empty file is valid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::{ModelConfig, TrainConfig};
use crate::synth::SynthConfig;
use crate::text::DEFAULT_DEDUP_THRESHOLD;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Word-vector file; random vectors are drawn when absent.
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch metrics, one JSON object per line.
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter init, shuffling, dropout, synthetic data and random embeddings.
    pub seed: u64,
    /// Worker threads for evaluation; training is always single-threaded.
    pub threads: usize,
    /// Store checkpoint tensors as 64-bit floats instead of 32-bit.
    pub f64_checkpoint: bool,
    /// Drop training questions too similar to a test question.
    pub dedup: bool,
    pub dedup_threshold: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 1,
            f64_checkpoint: false,
            dedup: true,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "dedup_threshold must lie in (0, 1], got {}",
                self.dedup_threshold
            )));
        }
        Ok(())
    }

    /// Seed for training-time randomness, kept apart from parameter init.
    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}
