//! SGD with momentum and AdamW over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 − step / total)^power`
    Poly,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::SgdMomentum
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_wd() -> f64 {
    1e-4
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Poly
}
fn default_power() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}

/// Config section `optim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default = "default_power")]
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: default_kind(),
            lr: default_lr(),
            momentum: default_momentum(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_wd(),
            schedule: default_schedule(),
            poly_power: default_power(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("optim.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optim.momentum must lie in [0, 1)"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("optim.betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0 && self.poly_power >= 0.0) {
            return Err(Error::config("optim.weight_decay, eps and poly_power must be non-negative (eps > 0)"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly => {
                let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
                self.lr * (1.0 - frac).max(0.0).powf(self.poly_power)
            }
        }
    }
}

/// Optimizer moments. SGD uses `first` only.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl OptimState {
    pub fn new(n: usize) -> Self {
        OptimState {
            first: vec![0.0; n],
            second: vec![0.0; n],
            t: 0,
        }
    }

    /// `[first, second]` as one flat vector.
    pub fn flatten(&self) -> Vec<f32> {
        let mut v = self.first.clone();
        v.extend_from_slice(&self.second);
        v
    }

    pub fn unflatten(flat: &[f32], t: u64) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::data("optimizer state has odd length"));
        }
        let n = flat.len() / 2;
        Ok(OptimState {
            first: flat[..n].to_vec(),
            second: flat[n..].to_vec(),
            t,
        })
    }
}

/// One update with learning rate `lr`.
pub fn apply_update(cfg: &OptimConfig, state: &mut OptimState, params: &mut [f32], grads: &[f32], lr: f64) {
    assert_eq!(params.len(), grads.len());
    state.t += 1;
    let lr = lr as f32;
    let wd = cfg.weight_decay as f32;
    match cfg.kind {
        OptimizerKind::SgdMomentum => {
            let mu = cfg.momentum as f32;
            for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        OptimizerKind::Adamw => {
            let (b1, b2) = (cfg.betas[0] as f32, cfg.betas[1] as f32);
            let bc1 = 1.0 - (cfg.betas[0]).powi(state.t as i32);
            let bc2 = 1.0 - (cfg.betas[1]).powi(state.t as i32);
            let (bc1, bc2) = (bc1 as f32, bc2 as f32);
            let eps = cfg.eps as f32;
            for (((p, &g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                *p -= lr * wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}
