//! AdamW with decoupled weight decay, and the warmup + polynomial-decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_iters: u64,
    pub warmup_factor: f64,
    pub total_iters: u64,
    pub min_lr: f64,
    pub poly_power: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-6,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_iters: 1500,
            warmup_factor: 1e-6,
            total_iters: 20000,
            min_lr: 1e-5,
            poly_power: 1.0,
            batch_size: 6,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("adam_eps", self.adam_eps),
            ("warmup_factor", self.warmup_factor),
            ("poly_power", self.poly_power),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.weight_decay < 0.0 || self.min_lr < 0.0 {
            return Err(Error::Config("weight_decay and min_lr must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0,1)".into()));
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(Error::Config("batch_size and total_iters must be positive".into()));
        }
        if self.warmup_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "warmup_iters {} must be below total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        Ok(())
    }

    /// The `min_lr` floor only makes sense below the base rate.
    pub fn floor_active(&self) -> bool {
        self.min_lr < self.base_lr
    }

    /// Emits a warning when `min_lr` is ignored.
    pub fn warn_if_floor_inactive(&self) {
        if !self.floor_active() && self.min_lr > 0.0 {
            log::warn!(
                "min_lr {} >= base_lr {}: the learning-rate floor is disabled",
                self.min_lr,
                self.base_lr
            );
        }
    }
}

/// Linear warmup from `warmup_factor·base_lr`, then polynomial decay to zero,
/// floored at `min_lr` when that floor lies below `base_lr`.
pub fn lr_at(iter: u64, cfg: &OptimConfig) -> Result<f64> {
    cfg.validate()?;
    if iter > cfg.total_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond total_iters {}",
            cfg.total_iters
        )));
    }
    if iter < cfg.warmup_iters {
        let frac = iter as f64 / cfg.warmup_iters as f64;
        return Ok(cfg.base_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac));
    }
    let span = (cfg.total_iters - cfg.warmup_iters) as f64;
    let progress = (iter - cfg.warmup_iters) as f64 / span;
    let lr = cfg.base_lr * (1.0 - progress).powf(cfg.poly_power);
    Ok(if cfg.floor_active() { lr.max(cfg.min_lr) } else { lr })
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update: `p −= lr·wd·p`, then the bias-corrected Adam step.
/// Parameters without a gradient entry are treated as having zero gradient.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{name}: gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let g = grads.get(name);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i] as f64);
            let mut x = *w as f64;
            x -= lr * cfg.weight_decay * x;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            x -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            *w = x as f32;
        }
    }
    Ok(())
}
