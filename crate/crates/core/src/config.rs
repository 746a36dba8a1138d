//! Run configuration: one JSON document for every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::losses::LossWeights;
use crate::pipeline::EvalConfig;
use crate::sbd::SbdConfig;
use crate::supervision::AeConfig;
use crate::train::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Synthetic bundle root (contains `scene/<name>/`).
    pub bundle: String,
    /// Output directory for checkpoints and logs.
    pub output: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            bundle: "data".into(),
            output: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub sbd: SbdConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub autoencoder: AeConfig,
    /// Geometry pretraining of the encoder before decoder training;
    /// skipped when absent.
    pub pretrain: Option<PretrainConfig>,
    pub eval: EvalConfig,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub paths: Paths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sbd.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(-1.0..=1.0).contains(&self.eval.tau) || !(-1.0..=1.0).contains(&self.eval.tau_t) {
            return Err(Error::Config("eval thresholds must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_json(&fsutil::read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_text(path, &self.to_json()?)
    }

    /// Whether two configs build models with the same parameter layout.
    pub fn same_architecture(&self, other: &RunConfig) -> bool {
        self.encoder == other.encoder && self.sbd == other.sbd && self.autoencoder.hidden == other.autoencoder.hidden
    }
}
