//! Adam with decoupled weight decay and a cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// One update of `param` in place: decay `param` by `lr · weight_decay`, then
/// take a bias-corrected Adam step.
pub fn adam_step(
    name: &str,
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len()
        || state.first_moment.len() != param.len()
        || state.second_moment.len() != param.len()
    {
        return Err(Error::dim("adam_step", param.shape(), &[grad.len()]));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::Parameter(format!(
            "adam betas must lie in [0, 1), got ({}, {})",
            cfg.beta1, cfg.beta2
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            name: name.to_string(),
            detail: format!("gradient[{i}] = {}", grad[i]),
        });
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, &g), m), v) in param
        .values_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub t_max: u64,
    pub eta_min: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-5,
            t_max: 50,
            eta_min: 0.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.eta_min >= 0.0) || self.eta_min > self.base_lr {
            return Err(Error::Config(format!(
                "lr schedule needs 0 <= eta_min <= base_lr and base_lr > 0, got {self:?}"
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("lr schedule t_max must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine annealing in closed form. The curve reaches `eta_min` at `t_max`
/// and rises back to `base_lr` at `2·t_max`, period `2·t_max`.
pub fn cosine_lr(schedule: &LrSchedule, step: u64) -> f64 {
    let phase = (step % (2 * schedule.t_max)) as f64 / schedule.t_max as f64;
    let lr = schedule.eta_min
        + 0.5 * (schedule.base_lr - schedule.eta_min) * (1.0 + (PI * phase).cos());
    lr.clamp(schedule.eta_min, schedule.base_lr)
}
