//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the gradient when its global L2 norm exceeds this (0 disables).
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: 0.1,
        }
    }
}

/// Moment estimates are keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub steps: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    /// Apply one update with gradients indexed by store position.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(usize, Tensor)>, lr: f64) -> Result<f64> {
        let c = self.config;
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = if c.max_grad_norm > 0.0 && norm > c.max_grad_norm {
            c.max_grad_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (idx, g) in grads {
            let (name, param) = store
                .get_index_mut(idx)
                .ok_or_else(|| dim_err!("gradient for parameter #{idx} outside the store"))?;
            if !param.kind.trainable() {
                continue;
            }
            if g.shape() != param.value.shape() {
                return Err(dim_err!("{name}: gradient {:?} for parameter {:?}", g.shape(), param.value.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let decay = if param.kind == ParamKind::Weight { c.weight_decay } else { 0.0 };
            let p = Arc::make_mut(&mut param.value);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (step + decay * *p);
            }
        }
        Ok(norm)
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `peak * floor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor: f64,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        lr_at(self, step)
    }
}

pub fn lr_at(s: &Schedule, step: usize) -> f64 {
    if step < s.warmup_steps {
        return s.peak * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps).max(1);
    let t = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    let lo = s.peak * s.floor;
    lo + 0.5 * (s.peak - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}
