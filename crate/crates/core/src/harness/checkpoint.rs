use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Maniqa;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters with the config and label range they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    /// Raw MOS range of the training manifest, for denormalizing scores.
    pub mos_min: f64,
    pub mos_max: f64,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, seed: u64, step: u64, params: &ParamStore, mos_range: (f64, f64)) -> Self {
        let mut config = config.clone();
        config.lr_schedule.base_lr = config.lr;
        Checkpoint {
            format_version: FORMAT_VERSION,
            step,
            seed,
            config,
            mos_min: mos_range.0,
            mos_max: mos_range.1,
            params: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::new(v.shape().to_vec(), v.values().to_vec()).expect("valid tensor")))
                .collect(),
        }
    }

    pub fn model(&self) -> Result<Maniqa> {
        Maniqa::new(self.config.model.clone())
    }

    /// Parameters, checked against the names and shapes the config implies.
    pub fn param_store(&self) -> Result<ParamStore> {
        let expected = self.model()?.init_params(0);
        if expected.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config implies {}",
                self.params.len(),
                expected.len()
            )));
        }
        let mut store = ParamStore::new();
        for (name, want) in expected.iter() {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numeric {
                    name: name.clone(),
                    detail: "non-finite value in checkpoint".into(),
                });
            }
            store.insert(name.clone(), t.clone());
        }
        Ok(store)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        if self.mos_max > self.mos_min {
            self.mos_min + v * (self.mos_max - self.mos_min)
        } else {
            self.mos_min
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {}, expected {FORMAT_VERSION}",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
