//! Run configuration: one sectioned TOML file covering the model, loss,
//! labels, training, detector, and dataset paths. Unknown keys are rejected
//! and every section's invariants are re-validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::SmootherConfig;
use crate::error::{Error, Result};
use crate::loss::FocalLossConfig;
use crate::model::ModelConfig;
use crate::train::{LabelConfig, TrainConfig};

/// Dataset locations and output paths. Relative paths are interpreted
/// relative to the config file's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_positives: Option<PathBuf>,
    pub train_negatives: Option<PathBuf>,
    /// Optional noise pool mixed into training clips.
    pub noise: Option<PathBuf>,
    pub eval_positives: Option<PathBuf>,
    pub eval_negatives: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub det_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: FocalLossConfig,
    pub labels: LabelConfig,
    pub train: TrainConfig,
    pub detector: SmootherConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.detector.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, rebasing relative data paths onto its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train_positives,
            &mut cfg.data.train_negatives,
            &mut cfg.data.noise,
            &mut cfg.data.eval_positives,
            &mut cfg.data.eval_negatives,
            &mut cfg.data.checkpoint_out,
            &mut cfg.data.metrics_out,
            &mut cfg.data.det_out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn checkpoint_out(&self) -> PathBuf {
        self.data.checkpoint_out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"))
    }

    pub fn metrics_out(&self) -> PathBuf {
        self.data.metrics_out.clone().unwrap_or_else(|| PathBuf::from("metrics.csv"))
    }

    pub fn det_out(&self) -> PathBuf {
        self.data.det_out.clone().unwrap_or_else(|| PathBuf::from("det.csv"))
    }
}
