//! Parameterised layers shared by the blocks and the network, plus the
//! forward-pass context carrying train/eval mode and the dropout stream.

use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::init::{self, InitRng};
use crate::tensor::{conv3d, linear_map, Scalar, Tensor};

/// Anything owning learnable tensors.
pub trait Params<T: Scalar> {
    /// Appends `(qualified name, tensor)` for every parameter, in a fixed order.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);

    fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut v = Vec::new();
        self.collect_params(prefix, &mut v);
        v
    }

    fn parameter_count(&self) -> usize {
        self.named_parameters("").iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Train/eval switch and the random stream for dropout and drop path.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    training: bool,
    rng: InitRng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { training: false, rng: InitRng::seed_from_u64(0) }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx { training: true, rng: InitRng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Whether a residual branch with drop-path rate `p` is skipped this pass.
    pub fn drop_branch(&mut self, p: f64) -> bool {
        self.training && p > 0.0 && (p >= 1.0 || self.rng.gen::<f64>() < p)
    }

    /// Inverted scaling for a surviving branch.
    pub fn branch_scale<T: Scalar>(&self, x: Tensor<T>, p: f64) -> Tensor<T> {
        if self.training && p > 0.0 {
            x.mul_scalar(1.0 / (1.0 - p))
        } else {
            x
        }
    }

    /// Elementwise inverted dropout; identity in eval mode.
    pub fn dropout<T: Scalar>(&mut self, x: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..x.numel()).map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        x.mul(&Tensor::from_vec(x.shape(), mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut InitRng, cin: usize, cout: usize, bias: bool) -> Self {
        Linear {
            weight: init::fan_in(rng, &[cout, cin], cin),
            bias: bias.then(|| init::fan_in(rng, &[cout], cin)),
        }
    }

    pub fn zeroed(cin: usize, cout: usize, bias: bool) -> Self {
        Linear { weight: init::zeros(&[cout, cin]), bias: bias.then(|| init::zeros(&[cout])) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear_map(x, &self.weight, self.bias.as_ref())
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        LayerNorm { gamma: init::constant(&[width], 1.0), beta: init::zeros(&[width]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, NORM_EPS)
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Scalar> {
    pub groups: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        GroupNorm { groups, gamma: init::constant(&[channels], 1.0), beta: init::zeros(&[channels]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gamma, &self.beta, NORM_EPS)
    }
}

impl<T: Scalar> Params<T> for GroupNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

/// Same-padding 3D convolution with odd kernel.
#[derive(Debug, Clone)]
pub struct Conv3d<T: Scalar> {
    /// `[out, in/groups, k, k, k]`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub groups: usize,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(rng: &mut InitRng, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> Self {
        let fan = cin / groups * k * k * k;
        Conv3d {
            weight: init::fan_in(rng, &[cout, cin / groups, k, k, k], fan),
            bias: bias.then(|| init::fan_in(rng, &[cout], fan)),
            groups,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d(x, &self.weight, self.bias.as_ref(), 1, self.kernel() / 2, self.groups)
    }
}

impl<T: Scalar> Params<T> for Conv3d<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_count_closed_form() {
        let l = Linear::<f32>::new(&mut InitRng::seed_from_u64(0), 3, 2, true);
        assert_eq!(l.parameter_count(), 8);
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f64>::full(&[1000], 1.0);
        let mut eval = ForwardCtx::eval();
        assert_eq!(eval.dropout(&x, 0.5).unwrap().to_vec(), x.to_vec());
        assert!(!eval.drop_branch(1.0));
        let mut tr = ForwardCtx::train(3);
        let y = tr.dropout(&x, 0.25).unwrap().to_vec();
        assert!(y.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let kept = y.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "{kept}");
        assert!(tr.drop_branch(1.0));
        assert!(!tr.drop_branch(0.0));
    }
}
