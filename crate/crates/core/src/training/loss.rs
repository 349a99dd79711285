//! Segmentation losses on class probabilities `[K, D, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const LOG_FLOOR: f64 = 1e-12;

/// `1 - mean_k (2 sum p t + eps) / (sum p + sum t + eps)` over all classes.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, target_onehot: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != target_onehot.shape() || probs.ndim() < 2 {
        return Err(Error::shape(format!(
            "dice: probabilities {:?} vs target {:?}",
            probs.shape(),
            target_onehot.shape()
        )));
    }
    let inter = probs.mul(target_onehot)?.sum_trailing();
    let num = inter.mul_scalar(2.0).add_scalar(DICE_EPS);
    let den = probs.sum_trailing().add(&target_onehot.detach().sum_trailing())?.add_scalar(DICE_EPS);
    Ok(num.div(&den)?.mean().neg().add_scalar(1.0))
}

/// `-sum_v w[t_v] ln p_{t_v}(v) / sum_v w[t_v]`, logs floored at 1e-12.
pub fn weighted_cross_entropy<T: Scalar>(probs: &Tensor<T>, target: &[u16], weights: &[f64]) -> Result<Tensor<T>> {
    let k = probs.shape().first().copied().unwrap_or(0);
    if weights.len() != k {
        return Err(Error::shape(format!("{} class weights for {k} classes", weights.len())));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::config("class weights must be positive"));
    }
    let index: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = index.iter().find(|&&t| t >= k) {
        return Err(Error::shape(format!("target class {bad} outside {k} classes")));
    }
    let picked = probs.pick(&index)?.ln_clamped(LOG_FLOOR);
    let w: Vec<T> = index.iter().map(|&t| T::of(weights[t])).collect();
    let total: f64 = index.iter().map(|&t| weights[t]).sum();
    let wt = Tensor::from_vec(picked.shape(), w)?;
    Ok(picked.mul(&wt)?.sum().mul_scalar(-1.0 / total))
}

/// One-hot `[K, spatial...]` encoding of class indices.
pub fn one_hot<T: Scalar>(target: &[u16], k: usize, spatial: &[usize]) -> Result<Tensor<T>> {
    let v = target.len();
    if spatial.iter().product::<usize>() != v {
        return Err(Error::shape(format!("{v} targets for spatial shape {spatial:?}")));
    }
    let mut out = vec![T::zero(); k * v];
    for (i, &t) in target.iter().enumerate() {
        if t as usize >= k {
            return Err(Error::shape(format!("target class {t} outside {k} classes")));
        }
        out[t as usize * v + i] = T::one();
    }
    let mut shape = vec![k];
    shape.extend_from_slice(spatial);
    Tensor::from_vec(&shape, out)
}

/// Dice plus weighted cross-entropy for the first `combined_epochs`
/// epochs, Dice alone afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub combined_epochs: usize,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule { combined_epochs: 1 }
    }
}

impl LossSchedule {
    pub fn uses_wce(&self, epoch: usize) -> bool {
        epoch < self.combined_epochs
    }
}

pub fn combined_loss<T: Scalar>(
    epoch: usize,
    schedule: LossSchedule,
    probs: &Tensor<T>,
    target: &[u16],
    weights: &[f64],
) -> Result<Tensor<T>> {
    let k = probs.shape()[0];
    let dice = dice_loss(probs, &one_hot(target, k, &probs.shape()[1..])?)?;
    if schedule.uses_wce(epoch) {
        dice.add(&weighted_cross_entropy(probs, target, weights)?)
    } else {
        Ok(dice)
    }
}

/// Median-frequency balancing: `freq_c` is the share of class `c` among
/// voxels of the maps containing it; `w_c = median(freq) / freq_c`.
/// Classes absent everywhere get weight 1.
pub fn median_frequency_weights<'a>(maps: impl IntoIterator<Item = &'a [u16]>, k: usize) -> Vec<f64> {
    let mut class_voxels = vec![0u64; k];
    let mut present_total = vec![0u64; k];
    for m in maps {
        let mut counts = vec![0u64; k];
        for &c in m {
            if (c as usize) < k {
                counts[c as usize] += 1;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                class_voxels[c] += counts[c];
                present_total[c] += m.len() as u64;
            }
        }
    }
    let freq: Vec<Option<f64>> =
        (0..k).map(|c| (class_voxels[c] > 0).then(|| class_voxels[c] as f64 / present_total[c] as f64)).collect();
    let mut known: Vec<f64> = freq.iter().flatten().copied().collect();
    if known.is_empty() {
        return vec![1.0; k];
    }
    known.sort_by(f64::total_cmp);
    let n = known.len();
    let median = if n % 2 == 1 { known[n / 2] } else { 0.5 * (known[n / 2 - 1] + known[n / 2]) };
    freq.iter().map(|f| f.map_or(1.0, |f| median / f)).collect()
}
