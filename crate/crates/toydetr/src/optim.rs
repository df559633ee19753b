//! Adam with optional decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, grad_clip: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Scales `grads` in place to the clipping norm and returns the norm
    /// before clipping.
    pub fn clip(grads: &mut [f64], max_norm: f64) -> f64 {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        norm
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *p;
            *p -= lr * update;
        }
    }
}
