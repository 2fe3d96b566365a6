use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            grad: Tensor::zeros(r, c),
            adam_m: Tensor::zeros(r, c),
            adam_v: Tensor::zeros(r, c),
            value,
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter, then zeroes the
/// gradients. Nothing is updated if any gradient is non-finite.
pub fn adam_step(params: &mut [Parameter], lr: f64, cfg: AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
    }
    let AdamConfig { beta1, beta2, eps } = cfg;
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..p.value.data.len() {
            let g = p.grad.data[i];
            let m = beta1 * p.adam_m.data[i] + (1.0 - beta1) * g;
            let v = beta2 * p.adam_v.data[i] + (1.0 - beta2) * g * g;
            p.adam_m.data[i] = m;
            p.adam_v.data[i] = v;
            p.value.data[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` once the metric has failed to
/// improve on its best value for `patience` evaluations in a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: u32,
    /// Relative improvement needed to reset the counter.
    pub threshold: f64,
    pub lr: f64,
    best: f64,
    bad_evals: u32,
    reductions: u32,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: u32) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            lr,
            best: f64::INFINITY,
            bad_evals: 0,
            reductions: 0,
        }
    }

    /// Feeds one evaluation of a metric to be minimized; returns the new lr.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if !metric.is_finite() {
            log::warn!("plateau scheduler ignored non-finite metric {metric}");
            return self.lr;
        }
        let bar = if self.best.is_finite() {
            self.best - self.threshold * self.best.abs()
        } else {
            f64::INFINITY
        };
        if metric < bar {
            self.best = metric;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        if self.bad_evals >= self.patience {
            self.lr *= self.factor;
            self.reductions += 1;
            self.bad_evals = 0;
        }
        self.lr
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }
}
