//! Run configuration: one TOML document with every key required.
//!
//! Two presets ship with the crate: `full` (ResNet-50, 224/192 views,
//! batch 256, 65,536 negatives, 200 epochs) and `desk` (small residual CNN,
//! 96/72 views, batch 32, 512 negatives, 30 epochs). Write one out with
//! `impash config --preset desk` and edit it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    /// Fraction of the source set held out for probe validation.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Momentum-encoder coefficient.
    pub alpha: f64,
    pub temperature: f64,
    pub queue_size: usize,
    pub queue_init: QueueInit,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_interval: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueInit {
    /// Random unit vectors.
    Random,
    /// Random unit vectors, then overwritten with momentum keys of augmented
    /// training images before the first step.
    Keys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `lr / factor` after the decay epoch.
    Divide,
    /// `lr - factor` after the decay epoch.
    Subtract,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub decay_epoch: u64,
    pub decay_factor: f64,
    pub decay_mode: DecayMode,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainAggregate {
    /// Unweighted mean of the per-class domain silhouettes.
    Mean,
    /// One silhouette over all points, clusters keyed by (class, domain),
    /// with the nearest-other-cluster search restricted to the same class.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Shorter side after resizing, before the centre crop.
    pub resize: usize,
    /// Centre-crop side fed to the encoder.
    pub crop: usize,
    pub domain_aggregate: DomainAggregate,
    /// Also probe a randomly initialised, untrained encoder for comparison.
    pub random_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn full() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                n_classes: 7,
                n_per_class: 625,
                image_size: 224,
                val_fraction: 0.1,
            },
            augment: AugmentConfig::full(),
            model: ModelConfig::full(),
            pretrain: PretrainConfig {
                epochs: 200,
                batch_size: 256,
                base_lr: 0.03,
                sgd_momentum: 0.9,
                weight_decay: 1e-4,
                alpha: 0.9999,
                temperature: 0.07,
                queue_size: 65_536,
                queue_init: QueueInit::Keys,
                checkpoint_interval: 10,
            },
            probe: ProbeConfig {
                epochs: 40,
                lr: 30.0,
                decay_epoch: 30,
                decay_factor: 5.0,
                decay_mode: DecayMode::Divide,
                batch_size: 256,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            eval: EvalConfig {
                resize: 255,
                crop: 224,
                domain_aggregate: DomainAggregate::Mean,
                random_baseline: false,
            },
        }
    }

    pub fn desk() -> Self {
        let full = Self::full();
        Self {
            seed: 0,
            data: DataConfig {
                n_classes: 4,
                n_per_class: 64,
                image_size: 96,
                val_fraction: 0.1,
            },
            augment: AugmentConfig::desk(),
            model: ModelConfig::desk(),
            pretrain: PretrainConfig {
                epochs: 30,
                batch_size: 32,
                alpha: 0.999,
                queue_size: 512,
                checkpoint_interval: 10,
                ..full.pretrain
            },
            probe: ProbeConfig {
                lr: 1.0,
                batch_size: 32,
                ..full.probe
            },
            eval: EvalConfig {
                resize: 96,
                crop: 96,
                domain_aggregate: DomainAggregate::Mean,
                random_baseline: true,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        self.augment.validate()?;
        let p = &self.pretrain;
        positive("pretrain.base_lr", p.base_lr)?;
        positive("pretrain.temperature", p.temperature)?;
        if p.batch_size == 0 || p.queue_size == 0 {
            return Err(Error::Config("pretrain.batch_size and pretrain.queue_size must be >= 1".into()));
        }
        if p.batch_size > p.queue_size {
            return Err(Error::Config(format!(
                "pretrain.batch_size {} exceeds pretrain.queue_size {}",
                p.batch_size, p.queue_size
            )));
        }
        if !(0.0..=1.0).contains(&p.alpha) {
            return Err(Error::Config(format!("pretrain.alpha must lie in [0, 1], got {}", p.alpha)));
        }
        positive("probe.lr", self.probe.lr)?;
        if self.probe.batch_size == 0 {
            return Err(Error::Config("probe.batch_size must be >= 1".into()));
        }
        if self.eval.crop == 0 || self.eval.crop > self.eval.resize {
            return Err(Error::Config("eval.crop must be in 1..=eval.resize".into()));
        }
        if self.data.n_classes < 2 {
            return Err(Error::Config("data.n_classes must be >= 2".into()));
        }
        Ok(())
    }
}
