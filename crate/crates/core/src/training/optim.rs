//! Adaptive-moment optimizer with decoupled weight decay, and the
//! cosine-with-linear-warmup learning-rate factor.

use std::f64::consts::PI;

use crate::autodiff::Tensor;

use super::TrainError;

/// Learning-rate multiplier for update number `step` (0-based) out of `total`.
pub fn lr_factor(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        Self { base_lr, total_steps, warmup_steps: (warmup_fraction * total_steps as f64).floor() as usize }
    }

    pub fn lr(&self, step: usize) -> f64 {
        self.base_lr * lr_factor(step, self.total_steps, self.warmup_steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: usize,
    /// First and second moments; `None` for parameters that are never updated.
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    /// `trainable[i]` decides whether parameter `i` gets moment buffers.
    pub fn new(params: &[Tensor], trainable: &[bool], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |on: bool, t: &Tensor| on.then(|| vec![0.0; t.len()]);
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().zip(trainable).map(|(t, &on)| zeros(on, t)).collect(),
            v: params.iter().zip(trainable).map(|(t, &on)| zeros(on, t)).collect(),
        }
    }

    /// One update at learning rate `lr`. A missing gradient counts as zero.
    /// Parameters without moment buffers are left untouched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], lr: f64) -> Result<(), TrainError> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(TrainError::NonFiniteGradient { param: i, index: j, step: self.step });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let shrink = 1.0 - lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else { continue };
            let g = grads.get(i).and_then(Option::as_deref);
            for (k, x) in p.values_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *x = *x * shrink - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
