//! Seeded parameter initialisation helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub type InitRng = ChaCha8Rng;

pub(crate) fn uniform<T: Scalar>(rng: &mut InitRng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::param(shape, data).expect("init shape")
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in<T: Scalar>(rng: &mut InitRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}

pub(crate) fn constant<T: Scalar>(shape: &[usize], value: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::param(shape, vec![T::of(value); n]).expect("init shape")
}

pub(crate) fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    constant(shape, 0.0)
}
