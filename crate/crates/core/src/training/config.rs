use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Convergence {
    pub patience_epochs: usize,
    pub min_rel_improvement: f64,
    /// Hard cap on the epochs spent in one stage.
    pub max_epochs_per_stage: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            patience_epochs: 5,
            min_rel_improvement: 1e-3,
            max_epochs_per_stage: 100,
        }
    }
}

/// Full specification of a training run.
///
/// As a file this is TOML: the scalar fields at the top level and the
/// `[convergence]`, `[model]` and `[loss]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Side of the square patches in meters. When unset it is derived from
    /// `model.voxel_size`.
    pub patch_size_m: Option<f64>,
    pub max_points_per_patch: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub base_lr: f64,
    pub warmup_batches: usize,
    /// L2 weight decay, never applied to prototype parameters.
    pub weight_decay: f64,
    pub seed: u64,
    /// Last curriculum stage to train, for ablations.
    pub last_stage: u8,
    pub convergence: Convergence,
    pub model: ModelConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size_m: None,
            max_points_per_patch: 100_000,
            batch_size: 64,
            batches_per_epoch: 512,
            base_lr: 1e-4,
            warmup_batches: 1000,
            weight_decay: 0.0,
            seed: 0,
            last_stage: 5,
            convergence: Convergence::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// Patch side in meters. With both the side and the voxel size given
    /// they must agree.
    pub fn patch_size(&self) -> Result<f64> {
        let from_voxels = self.model.voxel_size.map(|v| v * self.model.grid_resolution as f64);
        match (self.patch_size_m, from_voxels) {
            (Some(p), Some(v)) if (p - v).abs() > 1e-9 * p.abs().max(1.0) => Err(Error::Config(format!(
                "patch_size_m {p} disagrees with voxel_size × grid_resolution = {v}"
            ))),
            (Some(p), _) | (None, Some(p)) => Ok(p),
            (None, None) => Err(Error::Config("either patch_size_m or model.voxel_size must be set".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("max_points_per_patch", self.max_points_per_patch),
            ("batch_size", self.batch_size),
            ("batches_per_epoch", self.batches_per_epoch),
            ("convergence.patience_epochs", self.convergence.patience_epochs),
            ("convergence.max_epochs_per_stage", self.convergence.max_epochs_per_stage),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(1..=5).contains(&self.last_stage) {
            return Err(Error::Config(format!("last_stage {} outside 1..=5", self.last_stage)));
        }
        if !(self.convergence.min_rel_improvement >= 0.0) {
            return Err(Error::Config("convergence.min_rel_improvement must be non-negative".into()));
        }
        let p = self.patch_size()?;
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::Config(format!("patch size {p} must be positive")));
        }
        self.model.validate()?;
        self.loss.validate()
    }
}
