//! Optimizers and the learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Param;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Half-cosine decay from `lr0` at step 0 to 0 at `total`.
pub fn cosine_lr(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + Float::cos(core::f64::consts::PI * t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm the weight gradient is clipped to before each update;
    /// infinity disables clipping.
    pub grad_clip: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let clip_ok = self.grad_clip > 0.0;
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0 && clip_ok) {
            return Err(Error::Config(format!("invalid SGD settings {self:?}")));
        }
        Ok(())
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0 && betas && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// L2 norm over every gradient present.
pub fn grad_norm<T: Real>(params: &[Param<T>]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [Param<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let k = T::of(max_norm / (norm + 1e-6));
        for g in params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

fn check_len<T>(buffers: &[Option<Tensor<T>>], params: &[Param<T>]) -> Result<()> {
    if buffers.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors but was given {}",
            buffers.len(),
            params.len()
        )));
    }
    Ok(())
}

/// SGD with momentum and coupled weight decay:
/// `g += wd * w; buf = momentum * buf + g; w -= lr * buf`.
/// Tensors without a gradient are left untouched, buffer included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    momentum: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, num_params: usize) -> Self {
        Self {
            config,
            momentum: (0..num_params).map(|_| None).collect(),
        }
    }

    /// Clips (when configured) and applies one update. Returns the gradient
    /// norm before clipping.
    pub fn step(&mut self, params: &mut [Param<T>], lr: f64) -> Result<f64> {
        check_len(&self.momentum, params)?;
        let c = self.config.grad_clip;
        let norm = if c.is_finite() { clip_grad_norm(params, c) } else { grad_norm(params) };
        let (lr, mu, wd) = (T::of(lr), T::of(self.config.momentum), T::of(self.config.weight_decay));
        for (p, buf) in params.iter_mut().zip(&mut self.momentum) {
            let Some(g) = p.grad.as_ref() else { continue };
            let b = buf.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((w, &g), m) in p.value.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
                *m = mu * *m + g + wd * *w;
                *w -= lr * *m;
            }
        }
        Ok(norm)
    }
}

/// Adam with L2 weight decay folded into the gradient and bias-corrected
/// moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            t: 0,
            m: (0..num_params).map(|_| None).collect(),
            v: (0..num_params).map(|_| None).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Param<T>]) -> Result<()> {
        check_len(&self.m, params)?;
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - Float::powi(c.beta1, self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - Float::powi(c.beta2, self.t.min(i32::MAX as u64) as i32);
        let (b1, b2, wd, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.weight_decay), T::of(c.eps));
        let (step, bc2_sqrt) = (T::of(c.lr / bc1), T::of(Float::sqrt(bc2)));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.as_ref() else { continue };
            let m = m.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = v.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + wd * *w;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
