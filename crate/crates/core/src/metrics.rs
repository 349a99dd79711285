//! Segmentation metrics (DSC, VS, ASSD) and the Wilcoxon signed-rank test.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::paths::Dims;
use crate::pipeline::LabelMap;

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("masks of {} and {} voxels", a.len(), b.len())));
    }
    Ok(())
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&v| v).count()
}

/// `2|A n B| / (|A| + |B|)`, 1 when both are empty.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    check_len(a, b)?;
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = count(a) + count(b);
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// `1 - ||A| - |B|| / (|A| + |B|)`, 1 when both are empty.
pub fn volume_similarity(a: &[bool], b: &[bool]) -> Result<f64> {
    check_len(a, b)?;
    let (na, nb) = (count(a), count(b));
    Ok(if na + nb == 0 { 1.0 } else { 1.0 - na.abs_diff(nb) as f64 / (na + nb) as f64 })
}

/// Mask voxels with at least one face neighbour outside the mask; the
/// outside of the grid counts as outside.
pub fn surface(mask: &[bool], dims: Dims) -> Vec<bool> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[(z * h + y) * w + x] = border
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// Exact lower envelope of parabolas along one line (in place):
/// `f[i] <- min_j f[j] + (spacing (i - j))^2`.
fn edt_line(f: &mut [f64], spacing: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * spacing;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let dq = pos(q) - pos(v[k]);
        out.push(dq * dq + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance from every voxel centre to the nearest
/// `true` voxel (infinite if there is none).
pub fn squared_distance_transform(mask: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut f: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for start in 0..d * h * w {
            // first element of each line along `axis`
            if (start / stride) % n != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| f[start + i * stride]));
            edt_line(&mut line, spacing[axis], &mut v, &mut z, &mut out);
            for (i, &val) in line.iter().enumerate() {
                f[start + i * stride] = val;
            }
        }
    }
    f
}

/// Average symmetric surface distance; undefined if either mask is empty.
pub fn assd(a: &[bool], b: &[bool], dims: Dims, spacing: [f64; 3]) -> Result<f64> {
    check_len(a, b)?;
    if a.len() != dims.iter().product::<usize>() {
        return Err(Error::shape(format!("mask of {} voxels for {dims:?}", a.len())));
    }
    if count(a) == 0 || count(b) == 0 {
        return Err(Error::Undefined("surface distance with an empty mask".into()));
    }
    let (sa, sb) = (surface(a, dims), surface(b, dims));
    let (da, db) = (squared_distance_transform(&sa, dims, spacing), squared_distance_transform(&sb, dims, spacing));
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..sa.len() {
        if sa[i] {
            total += db[i].sqrt();
            n += 1;
        }
        if sb[i] {
            total += da[i].sqrt();
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub index: usize,
    pub label_id: i32,
    pub name: String,
    pub dsc: f64,
    pub vs: f64,
    /// Absent when the class is empty in either map.
    pub assd: Option<f64>,
    pub in_pred: bool,
    pub in_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub include_background: bool,
    pub mean_dsc: f64,
    pub mean_vs: f64,
    /// Mean over classes with a defined ASSD.
    pub mean_assd: Option<f64>,
    /// Classes present in exactly one of the two maps.
    pub missing: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub include_background: bool,
    pub spacing: [f64; 3],
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { include_background: false, spacing: [1.0; 3] }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-class metrics and their means; classes absent from both maps score
/// DSC = VS = 1 and have no ASSD.
pub fn evaluate_pair(pred: &LabelMap, truth: &LabelMap, opts: EvalOptions) -> Result<MetricsReport> {
    if pred.dims != truth.dims {
        return Err(Error::shape(format!("prediction {:?} vs truth {:?}", pred.dims, truth.dims)));
    }
    if pred.classes != truth.classes {
        return Err(Error::shape("prediction and truth use different class tables"));
    }
    let first = usize::from(!opts.include_background);
    let mut classes = Vec::new();
    for e in &truth.classes.entries()[first..] {
        let (p, t) = (pred.mask(e.index), truth.mask(e.index));
        let (in_pred, in_truth) = (p.contains(&true), t.contains(&true));
        classes.push(ClassMetrics {
            index: e.index,
            label_id: e.label_id,
            name: e.name.clone(),
            dsc: dsc(&p, &t)?,
            vs: volume_similarity(&p, &t)?,
            assd: (in_pred && in_truth).then(|| assd(&p, &t, truth.dims, opts.spacing)).transpose()?,
            in_pred,
            in_truth,
        });
    }
    Ok(MetricsReport {
        include_background: opts.include_background,
        mean_dsc: mean(classes.iter().map(|c| c.dsc)).unwrap_or(1.0),
        mean_vs: mean(classes.iter().map(|c| c.vs)).unwrap_or(1.0),
        mean_assd: mean(classes.iter().filter_map(|c| c.assd)),
        missing: classes.iter().filter(|c| c.in_pred != c.in_truth).map(|c| c.index).collect(),
        classes,
    })
}

impl MetricsReport {
    /// One row per class; the ASSD cell is empty when undefined.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "index,label_id,name,dsc,vs,assd")?;
        for c in &self.classes {
            let assd = c.assd.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{},{}", c.index, c.label_id, c.name.replace(',', ";"), c.dsc, c.vs, assd)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub n_effective: usize,
    /// Whether `p` comes from the exact null distribution.
    pub exact: bool,
}

pub const WILCOXON_EXACT_MAX: usize = 20;

/// Average ranks (1-based) of `v`, plus the tie-group sizes.
fn average_ranks(v: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Paired two-sided signed-rank test. Zero differences are dropped; tied
/// magnitudes get average ranks. Exact null distribution over all sign
/// patterns for up to 20 pairs, tie-corrected normal approximation with
/// continuity correction beyond.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(format!("paired samples of lengths {} and {}", x.len(), y.len())));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::Undefined("all paired differences are zero".into()));
    }
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&mags);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let (p, exact) = if n <= WILCOXON_EXACT_MAX {
        // distribution of 2 W+ over the 2^n equally likely sign patterns
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let limit = (2.0 * w).round() as usize;
        let below: f64 = counts[..=limit].iter().sum();
        ((2.0 * below / 2f64.powi(n as i32)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let z = (w - mean + 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * normal.cdf(z)).min(1.0), false)
    };
    Ok(WilcoxonResult { w, w_plus, w_minus, p_two_sided: p, n_effective: n, exact })
}
