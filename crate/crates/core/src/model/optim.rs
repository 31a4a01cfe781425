use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::Tensor;

/// Linear warmup from `lr_start` to `lr_peak` over `warmup` steps, then a
/// cosine decay from `lr_peak` reaching 0 at step `total - 1`.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr_start: f64, lr_peak: f64) -> f64 {
    if step < warmup {
        return lr_start + (lr_peak - lr_start) * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return lr_peak;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.total_steps, self.warmup_steps, self.lr_start, self.lr_peak)
    }
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64, ModelError> {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        for &x in g {
            if !x.is_finite() {
                return Err(ModelError::NonFiniteGrad(format!("#{i}")));
            }
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= k);
    }
    Ok(norm)
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// `p <- p·(1 - lr·wd)`, then `p <- p - lr·m̂/(sqrt(v̂) + eps)`.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *x *= decay;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}
