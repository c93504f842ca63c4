//! Learning-rate schedule and the Adam update.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Linear warmup followed by cosine decay from `base_lr` to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= base_lr, got min_lr={} base_lr={}",
                self.min_lr, self.base_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at global step `t` (0-based).
    pub fn at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.base_lr * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps + 1);
        if decay_steps == 0 {
            return self.base_lr;
        }
        let progress = ((t - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = |&(r, c): &(usize, usize)| vec![0.0; r * c];
        Self {
            cfg,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// Apply one update in place; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let mut data = p.data().to_vec();
            for (j, (w, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = beta1 * *m + (1.0 - beta1) * gj;
                *v = beta2 * *v + (1.0 - beta2) * gj * gj;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            *p = Tensor::new(p.rows(), p.cols(), data).map_err(|_| Error::NonFinite { op: "adam" })?;
        }
        Ok(())
    }
}
