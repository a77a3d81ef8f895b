//! Run configuration, read from a TOML file whose keys mirror the fields
//! below exactly. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{FocalParams, LossWeights};
use crate::model::{AdamWConfig, LossOptions, ModelConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 50,
            min_lr_ratio: 0.01,
            max_grad_norm: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        Schedule {
            peak: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps,
            floor: self.min_lr_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of a horizontal flip.
    pub hflip: f64,
    /// Range of the zoom factor about the image centre; `[1, 1]` disables it.
    pub scale_jitter: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: 0.5,
            scale_jitter: [0.8, 1.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Total images across the three splits.
    pub size: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            size: 286,
            split: [0.70, 0.15, 0.15],
            image_size: 128,
            min_instances: 1,
            max_instances: 8,
        }
    }
}

impl DataConfig {
    /// Image counts per split: train and val are rounded, test takes the rest.
    pub fn counts(&self) -> [usize; 3] {
        let train = (self.size as f64 * self.split[0]).round() as usize;
        let val = ((self.size as f64 * self.split[1]).round() as usize).min(self.size - train.min(self.size));
        [train.min(self.size), val, self.size - train.min(self.size) - val]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Supervise every decoder layer, not only the last.
    pub aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let f = FocalParams::default();
        LossConfig {
            cls_weight: w.cls,
            l1_weight: w.l1,
            giou_weight: w.giou,
            focal_alpha: f.alpha,
            focal_gamma: f.gamma,
            aux: true,
        }
    }
}

impl LossConfig {
    pub fn options(&self) -> LossOptions {
        LossOptions {
            weights: LossWeights {
                cls: self.cls_weight,
                l1: self.l1_weight,
                giou: self.giou_weight,
            },
            focal: FocalParams {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
            },
            aux: self.aux,
        }
    }
}

/// File locations used by the workflows that read existing artifacts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory; when unset, training regenerates the dataset from the seed.
    pub data: Option<PathBuf>,
    /// Checkpoint read by `eval`, `fuse` and `bench`.
    pub checkpoint: Option<PathBuf>,
    /// Prediction file scored by `eval` instead of running a checkpoint.
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Split scored by `eval`: "train", "val" or "test".
    pub eval_split: String,
    /// Epochs per configuration in `ablate`.
    pub ablate_epochs: usize,
    pub bench_warmup: usize,
    pub bench_iters: usize,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 50,
            batch_size: 8,
            eval_split: "test".into(),
            ablate_epochs: 3,
            bench_warmup: 20,
            bench_iters: 100,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            loss: LossConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.data, &mut cfg.paths.checkpoint, &mut cfg.paths.predictions]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut bad = Vec::new();
        let d = &self.data;
        let sum: f64 = d.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || d.split.iter().any(|&s| s < 0.0) {
            bad.push(format!("data.split must be non-negative and sum to 1, got {:?}", d.split));
        }
        if d.image_size == 0 || d.image_size % self.model.divisor() != 0 {
            bad.push(format!("data.image_size {} must be a positive multiple of {}", d.image_size, self.model.divisor()));
        }
        if d.min_instances == 0 || d.min_instances > d.max_instances {
            bad.push(format!("data instance range [{}, {}] is empty or starts at 0", d.min_instances, d.max_instances));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".into());
        }
        if !["train", "val", "test"].contains(&self.eval_split.as_str()) {
            bad.push(format!("eval_split must be train, val or test, got {}", self.eval_split));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip) {
            bad.push("augment.hflip must be a probability".into());
        }
        let [lo, hi] = self.augment.scale_jitter;
        if !(lo > 0.0 && lo <= hi) {
            bad.push(format!("augment.scale_jitter [{lo}, {hi}] is not a positive range"));
        }
        if !(self.optim.lr > 0.0) || self.optim.weight_decay < 0.0 {
            bad.push("optim.lr must be positive and optim.weight_decay non-negative".into());
        }
        if self.bench_iters == 0 {
            bad.push("bench_iters must be at least 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.data.counts(), [200, 43, 43]);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[model]\nrep = false\n").unwrap();
        assert_eq!(c.seed, 7);
        assert!(!c.model.rep && c.model.da);
        assert_eq!(c.epochs, 50);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["sed = 1", "[model]\nwidth = 3", "[optim]\nlearning_rate = 1.0", "[paths]\nout = 'x'"] {
            match RunConfig::from_toml(text) {
                Err(Error::Config(msg)) => assert!(msg.contains("unknown field"), "{msg}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::from_toml("[data]\nsplit = [0.5, 0.2, 0.2]").is_err());
        assert!(RunConfig::from_toml("[data]\nimage_size = 100").is_err());
        assert!(RunConfig::from_toml("batch_size = 0").is_err());
        assert!(RunConfig::from_toml("[model]\nheads = 3").is_err());
    }
}
