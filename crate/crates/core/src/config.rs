//! Run configuration read from TOML.
//!
//! A config file only needs the keys it changes. Missing keys come from the
//! defaults, or from the toy preset when `toy = true` (or `--toy`) is set.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, DegradeParams};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clipping threshold; off when absent.
    pub grad_clip: Option<f64>,
    /// Cosine restart period in steps; one cycle over the whole run when absent.
    pub restart_period: Option<u64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_floor: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: None,
            restart_period: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be finite and > 0"));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor < self.lr) {
            return Err(Error::config("optimizer.lr_floor", "must be >= 0 and below optimizer.lr"));
        }
        for (field, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("optimizer.grad_clip", "must be > 0"));
        }
        if self.restart_period == Some(0) {
            return Err(Error::config("optimizer.restart_period", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Pairs generated at the training resolution.
    pub train: usize,
    pub val: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 20,
            val: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `input/` and `target/`.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Newline-separated ids restricting the training set.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Generate pairs with the synthetic degradation instead of reading files.
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub dir: Option<PathBuf>,
    /// Save `last.ckpt` every this many steps; 0 saves only at the end.
    pub every: u64,
    /// Run-record log; defaults to `<dir>/train.ndjson`.
    pub log: Option<PathBuf>,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            dir: None,
            every: 500,
            log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub toy: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps instead of `epochs` full passes.
    pub max_steps: Option<u64>,
    pub precision: Precision,
    /// Training resolution `[height, width]`; images are resized on load.
    pub image_size: [usize; 2],
    /// Validate every this many epochs (when a validation set exists).
    pub validate_every: usize,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub degrade: DegradeParams,
    pub data: DataConfig,
    pub checkpoint: CheckpointConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            toy: false,
            seed: 0,
            epochs: 300,
            batch_size: 4,
            max_steps: None,
            precision: Precision::F32,
            image_size: [256, 256],
            validate_every: 1,
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            degrade: DegradeParams::default(),
            data: DataConfig::default(),
            checkpoint: CheckpointConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: toy model at 64x64.
    pub fn toy() -> Self {
        Self {
            toy: true,
            model: ModelConfig::toy(),
            image_size: [64, 64],
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str, force_toy: bool) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        let toy = force_toy || file.get("toy").and_then(toml::Value::as_bool).unwrap_or(false);
        let base = if toy { Self::toy() } else { Self::default() };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config("config", e.to_string()))?;
        merge(&mut merged, file);
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        cfg.toy = toy;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, force_toy: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, force_toy)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps", "must be >= 1"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("validate_every", "must be >= 1"));
        }
        let d = self.model.spatial_divisor();
        if self.image_size.iter().any(|&s| s == 0 || s % d != 0) {
            return Err(Error::config(
                "image_size",
                format!("both sides must be positive multiples of {d}"),
            ));
        }
        self.optimizer.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.degrade.validate()?;
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
