//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

pub const WARMUP_LR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = |_: _| -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        OptimState {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    /// One AdamW update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if self.first.len() != params.len() {
            return Err(Error::config("optimizer state does not match the parameter set"));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);

        for (k, p) in params.iter_mut().enumerate() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::dim(format!("gradient shape mismatch for `{}`", p.name)));
            }
            let decay = if p.decay {
                T::lit(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() * inv_bc2_sqrt + eps;
                *w = *w * decay - step_size * *m / denom;
            }
            if !p.value.all_finite() {
                return Err(Error::Numerical(format!("parameter `{}` became non-finite", p.name)));
            }
        }
        Ok(())
    }
}

/// Linear ramp from [`WARMUP_LR`] to `base_lr`, then cosine decay to zero.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    CosineSchedule {
        base_lr,
        warmup_lr: WARMUP_LR,
        warmup_steps,
        total_steps,
    }
    .lr(step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * frac;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
