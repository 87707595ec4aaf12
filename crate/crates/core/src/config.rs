//! Run configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::losses::LossConfig;
use crate::taskgen::DatasetConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (1-based) at whose start the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
}

impl OptimizerConfig {
    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![21, 28],
            lr_decay: 0.1,
        }
    }
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Everything one training run depends on.
///
/// Every field except `schema_version` may be omitted and takes its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub data: DatasetConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Drives initialization, shuffling and routing. The dataset has its own seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write every sampled selective weight to `routing_audit.csv`.
    #[serde(default)]
    pub write_routing_audit: bool,
    /// Write the generated train and val splits as CSV.
    #[serde(default)]
    pub dump_dataset: bool,
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    64
}

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: schema_version(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            data: DatasetConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: default_seed(),
            output_dir: default_output_dir(),
            write_routing_audit: false,
            dump_dataset: false,
        }
    }
}

impl RunConfig {
    /// Parses and validates; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let reason = e.into_inner().to_string();
            // a missing field is reported against its parent; name the field itself
            let missing = reason
                .strip_prefix("missing field `")
                .and_then(|r| r.split('`').next())
                .map(str::to_string);
            let field = match (path.as_str(), missing) {
                (".", Some(m)) => m,
                (".", None) => "config".into(),
                (_, Some(m)) => format!("{path}.{m}"),
                (_, None) => path,
            };
            Error::config(field, reason)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        self.head.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        if self.head.input_dim != self.data.feature_dim {
            return Err(Error::config("head.input_dim", "must equal data.feature_dim"));
        }
        if self.head.num_classes != self.data.num_classes {
            return Err(Error::config("head.num_classes", "must equal data.num_classes"));
        }
        let opt = &self.optimizer;
        if !(opt.lr > 0.0 && opt.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&opt.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be nonnegative"));
        }
        if !(opt.lr_decay > 0.0 && opt.lr_decay <= 1.0) {
            return Err(Error::config("optimizer.lr_decay", "must lie in (0, 1]"));
        }
        if opt.lr_decay_epochs.contains(&0) {
            return Err(Error::config("optimizer.lr_decay_epochs", "epochs are 1-based"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        Ok(())
    }
}
