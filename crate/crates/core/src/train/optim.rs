//! Adaptive moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied only to parameters flagged for decay (matrices).
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, clip: 1.0, warmup: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        AdamW { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cfg.warmup == 0 || step >= self.cfg.warmup {
            self.cfg.lr
        } else {
            self.cfg.lr * (step + 1) as f64 / self.cfg.warmup as f64
        }
    }

    /// Clips `grads` in place and applies one update. Returns the pre-clip norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &mut ParamGrads) -> Result<f64> {
        if grads.grads.len() != self.m.len() || grads.grads.len() != store.len() {
            return Err(Error::dim("adamw", "gradient count differs from parameter count"));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric { op: "adamw" });
        }
        if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            grads.scale(self.cfg.clip / norm);
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let decay = if store.entry(id).decay { self.cfg.weight_decay } else { 0.0 };
            let g = &grads.grads[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for e in 0..p.len() {
                m[e] = b1 * m[e] + (1.0 - b1) * g[e];
                v[e] = b2 * v[e] + (1.0 - b2) * g[e] * g[e];
                let step = (m[e] / c1) / ((v[e] / c2).sqrt() + self.cfg.eps) + decay * p[e];
                p[e] -= lr * step;
            }
        }
        Ok(norm)
    }
}
