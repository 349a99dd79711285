//! Cosine annealing with warm restarts and the AdamW optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub lr_max: f64,
    pub lr_min: f64,
    pub t0: usize,
    pub t_mult: usize,
}

impl CosineWarmRestarts {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) || !(self.lr_min >= 0.0) || !self.lr_max.is_finite() {
            return Err(Error::config(format!("need 0 <= lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max)));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::config("T_0 and T_mult must be at least 1"));
        }
        Ok(())
    }

    /// Position `(t_cur, T_i)` of `step` within its cycle.
    pub fn cycle(&self, step: usize) -> (usize, usize) {
        let mut t_cur = step;
        let mut t_i = self.t0.max(1);
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i = t_i.saturating_mul(self.t_mult.max(1));
        }
        (t_cur, t_i)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let (t_cur, t_i) = self.cycle(step);
        let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos())
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW over a fixed, named parameter list. Arithmetic is in `f64`;
/// moments are stored in the parameter type.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f32> {
    pub params: Vec<(String, Tensor<T>)>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        AdamW { params, m, v, t: 0, weight_decay }
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the accumulated gradients. A parameter with no
    /// gradient is treated as having a zero gradient. Non-finite gradients
    /// abort the step before any parameter changes.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        for (name, p) in &self.params {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for (((_, p), m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            p.update_with_grad(|data, grad| {
                for i in 0..data.len() {
                    let g = grad.map_or(0.0, |g| g[i].f64());
                    let mi = b1 * m[i].f64() + (1.0 - b1) * g;
                    let vi = b2 * v[i].f64() + (1.0 - b2) * g * g;
                    m[i] = T::of(mi);
                    v[i] = T::of(vi);
                    let mhat = m[i].f64() / c1;
                    let vhat = v[i].f64() / c2;
                    let x = data[i].f64() * shrink - lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    data[i] = T::of(x);
                }
            });
        }
        Ok(())
    }
}
