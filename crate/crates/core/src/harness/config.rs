use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, LrSchedule};

/// Training and evaluation protocol. `lr` is the schedule's base rate and
/// overrides `lr_schedule.base_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub crop_size: usize,
    pub flip_prob: f64,
    pub split_ratio: f64,
    pub seeds: Vec<u64>,
    pub test_crops: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-5,
            weight_decay: 1e-5,
            batch_size: 8,
            epochs: 30,
            lr_schedule: LrSchedule::default(),
            crop_size: 32,
            flip_prob: 0.5,
            split_ratio: 0.8,
            seeds: vec![0, 1, 2, 3, 4],
            test_crops: 20,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            ..self.lr_schedule
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop_size != self.model.image_size {
            return bad(format!(
                "crop_size {} must equal model.image_size {}",
                self.crop_size, self.model.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.test_crops == 0 {
            return bad("test_crops must be at least 1".into());
        }
        self.schedule().validate()
    }

    /// Parses and validates a JSON config; missing keys take defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.lr_schedule.base_lr = cfg.lr;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
