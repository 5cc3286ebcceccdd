//! TOML run configuration.
//!
//! Every section is optional and falls back to its defaults; unknown keys
//! anywhere are rejected. [`RunConfig::to_toml`] produces the resolved
//! document written next to each command's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codistill::DistillConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::importance::ImportanceConfig;
use crate::model::{DiTConfig, ModelShape};
use crate::prune_train::Stage2Config;
use crate::train::BaseTrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_heldout: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_heldout: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per evaluation; labels follow the held-out set.
    pub n_samples: usize,
    /// Euler steps of the unpruned teacher reference.
    pub teacher_steps: usize,
    /// Guidance scale of the teacher reference.
    pub teacher_cfg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            teacher_steps: 28,
            teacher_cfg: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub steps: Vec<usize>,
    pub retention: Vec<f64>,
    /// Concurrent cells.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 4],
            retention: vec![0.5, 0.7, 1.0],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub dataset: DatasetConfig,
    pub model: ModelShape,
    pub base: BaseTrainConfig,
    pub importance: ImportanceConfig,
    pub stage2: Stage2Config,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            data: DataConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelShape::default(),
            base: BaseTrainConfig::default(),
            importance: ImportanceConfig::default(),
            stage2: Stage2Config::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// Fingerprint of everything that affects results; the output directory is excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        crate::metrics::fingerprint(&c)
    }

    pub fn dit(&self) -> Result<DiTConfig> {
        DiTConfig::new(&self.data, &self.model)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(as_config)?;
        self.dit().map_err(as_config)?;
        self.base.validate()?;
        self.stage2.validate()?;
        self.distill.validate()?;
        let n = self.model.n_blocks;
        if self.importance.retention.is_none() && (self.importance.n_short == 0 || self.importance.n_short > n) {
            return Err(Error::Config(format!("importance.n_short must be in 1..={n}")));
        }
        if let Some(r) = self.importance.retention {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("importance.retention must be in (0, 1], got {r}")));
            }
        }
        if self.dataset.n_train < self.base.batch_size.max(self.stage2.batch_size).max(self.importance.batch_size) {
            return Err(Error::Config("dataset.n_train is smaller than a training batch".into()));
        }
        if self.dataset.n_heldout == 0 || self.eval.n_samples == 0 || self.eval.teacher_steps == 0 {
            return Err(Error::Config("held-out set, eval samples and teacher steps must be non-zero".into()));
        }
        if self.sweep.steps.contains(&0) || self.sweep.retention.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config("sweep steps must be ≥ 1 and retentions in (0, 1]".into()));
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}
