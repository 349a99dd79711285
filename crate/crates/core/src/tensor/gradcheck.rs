//! Central-difference verification of analytic gradients.

use super::{no_grad, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked elements of `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so that components whose
    /// true derivative is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, floor: 1e-5, max_per_input: None }
    }
}

/// Compares the analytic gradient of scalar `f` with respect to every
/// element of every input against central differences.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_with(inputs, f, GradCheckOptions { h, tol, ..Default::default() })
}

pub fn grad_check_with(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach_with_grad()).collect();
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let _guard = no_grad();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance: opts.tol,
        passed: true,
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_vec()).collect();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let step = match opts.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(step) {
            let eval = |delta: f64| -> Result<f64> {
                let args: Vec<Tensor<f64>> = base
                    .iter()
                    .zip(inputs)
                    .enumerate()
                    .map(|(k, (vals, orig))| {
                        let mut v = vals.clone();
                        if k == i {
                            v[j] += delta;
                        }
                        Tensor::from_vec(orig.shape(), v)
                    })
                    .collect::<Result<_>>()?;
                Ok(f(&args)?.item())
            };
            let numeric = (eval(opts.h)? - eval(-opts.h)?) / (2.0 * opts.h);
            let a = analytic[i][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}

/// Like [`grad_check_with`] but for leaf parameters captured by `f`
/// itself: elements are perturbed in place and restored afterwards.
pub fn grad_check_params(
    params: &[Tensor<f64>],
    f: impl Fn() -> Result<Tensor<f64>>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> =
        params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let _guard = no_grad();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance: opts.tol,
        passed: true,
    };
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        let step = match opts.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(step) {
            let orig = p.data()[j];
            let eval = |v: f64| -> Result<f64> {
                p.update_data(|d| d[j] = v);
                Ok(f()?.item())
            };
            let plus = eval(orig + opts.h)?;
            let minus = eval(orig - opts.h)?;
            p.update_data(|d| d[j] = orig);
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[i][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
