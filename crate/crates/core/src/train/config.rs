use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::LossWeights;
use super::optim::Schedule;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::gated::HeadConfig;
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Cubic crop extent fed to the network.
    pub patch_extent: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub schedule: Schedule,
    /// Cap on optimizer steps per epoch; `None` visits every training sample.
    pub batches_per_epoch: Option<usize>,
    pub augment: bool,
    pub foreground_crop: bool,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            weight_decay: 1e-5,
            warmup_epochs: 5,
            total_epochs: 30,
            batch_size: 2,
            patch_extent: 24,
            seed: 0,
            loss: LossWeights::default(),
            schedule: Schedule::CosineAfterWarmup,
            batches_per_epoch: None,
            augment: true,
            foreground_crop: true,
            val_every: 1,
            dtype: DType::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "need warmup_epochs < total_epochs, got {} and {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        let w = &self.loss;
        if [w.dice, w.cross_entropy, w.domain_aux].iter().any(|v| !(*v >= 0.0)) || w.dice + w.cross_entropy == 0.0 {
            return Err(Error::config("loss weights must be non-negative with a nonzero segmentation term"));
        }
        if self.batch_size == 0 || self.patch_extent == 0 || self.val_every == 0 {
            return Err(Error::config("batch_size, patch_extent and val_every must be >= 1"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::config("batches_per_epoch must be >= 1 when set"));
        }
        Ok(())
    }
}

/// Everything a run needs besides data: the `[train]`, `[backbone]` and
/// `[head]` tables of a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        let div = self.backbone.divisor();
        if self.train.patch_extent % div != 0 {
            return Err(Error::config(format!(
                "patch_extent {} must be divisible by {div} for {} stages",
                self.train.patch_extent, self.backbone.n_stages
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let c = ExperimentConfig::from_toml("[train]\ntotal_epochs = 4\nwarmup_epochs = 1\n[backbone]\nbase_channels = 4\n")
            .unwrap();
        assert_eq!(c.train.total_epochs, 4);
        assert_eq!(c.backbone.base_channels, 4);
        assert_eq!(c.train.lr_init, 1e-4);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(ExperimentConfig::from_toml("[train]\nwarmup_epochs = 30\ntotal_epochs = 30\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlr_init = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\npatch_extent = 10\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbogus = 1\n").is_err());
    }
}
