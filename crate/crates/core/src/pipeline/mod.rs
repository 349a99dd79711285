//! Segmentation pipeline: volumes and label maps, preprocessing, patch
//! grids, probability-vote reconstruction and the two inference pipelines
//! (whole volume, and a single patch around the hippocampus).

mod classes;
pub mod io;

pub use classes::{ClassEntry, ClassRole, ClassTable};
pub use io::{read_labels, read_volume, write_labels, write_volume};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::nn::ForwardCtx;
use crate::paths::Dims;
use crate::tensor::{no_grad, Tensor};

fn voxels(dims: Dims) -> usize {
    dims.iter().product()
}

/// A 3D scalar image, `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub data: Vec<f32>,
    /// Free-form axis convention tag such as `"LIA"`.
    pub orientation: String,
    /// Intensity range before rescaling, if the volume was preprocessed.
    pub value_range: Option<(f32, f32)>,
    /// Raw NIfTI header of the source file, kept for writing back.
    pub nifti_header: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != voxels(dims) || dims.contains(&0) {
            return Err(Error::shape(format!("volume {dims:?} with {} samples", data.len())));
        }
        Ok(Volume { dims, data, orientation: String::new(), value_range: None, nifti_header: None })
    }

    pub fn at(&self, [z, y, x]: Dims) -> f32 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// Per-voxel class indices into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: Dims,
    pub data: Vec<u16>,
    pub classes: ClassTable,
    pub orientation: String,
    pub nifti_header: Option<Vec<u8>>,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u16>, classes: ClassTable) -> Result<Self> {
        if data.len() != voxels(dims) || dims.contains(&0) {
            return Err(Error::shape(format!("label map {dims:?} with {} voxels", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&i| i as usize >= classes.len()) {
            return Err(Error::Format(format!("class index {bad} outside a table of {}", classes.len())));
        }
        Ok(LabelMap { dims, data, classes, orientation: String::new(), nifti_header: None })
    }

    pub fn background(dims: Dims, classes: ClassTable) -> Self {
        LabelMap::new(dims, vec![0; voxels(dims)], classes).expect("background map is valid")
    }

    pub fn at(&self, [z, y, x]: Dims) -> u16 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.data.iter().map(|&c| c as usize == class).collect()
    }
}

/// Axis permutation and flips: output axis `i` reads input axis
/// `permutation[i]`, reversed when `flip[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisOps {
    pub permutation: [usize; 3],
    pub flip: [bool; 3],
}

impl Default for AxisOps {
    fn default() -> Self {
        AxisOps { permutation: [0, 1, 2], flip: [false; 3] }
    }
}

impl AxisOps {
    pub fn validate(&self) -> Result<()> {
        let mut p = self.permutation;
        p.sort_unstable();
        if p != [0, 1, 2] {
            return Err(Error::config(format!("axis permutation {:?}", self.permutation)));
        }
        Ok(())
    }

    pub fn apply_dims(&self, dims: Dims) -> Dims {
        self.permutation.map(|a| dims[a])
    }
}

/// Geometry of a preprocessing run, sufficient to map label maps between
/// the original grid and the model grid in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub input_dims: Dims,
    pub axis_ops: AxisOps,
    pub target_dims: Dims,
    /// Start of the target window in the permuted grid; negative means
    /// zero padding before the data.
    pub offsets: [isize; 3],
}

impl Transform {
    pub fn new(input_dims: Dims, axis_ops: AxisOps, target_dims: Dims) -> Result<Self> {
        axis_ops.validate()?;
        if target_dims.contains(&0) {
            return Err(Error::config(format!("target dims {target_dims:?}")));
        }
        let permuted = axis_ops.apply_dims(input_dims);
        let offsets = [0, 1, 2].map(|i| (permuted[i] as isize - target_dims[i] as isize).div_euclid(2));
        Ok(Transform { input_dims, axis_ops, target_dims, offsets })
    }

    /// Original coordinate of target voxel `t`, if it is not padding.
    pub fn source_of(&self, t: Dims) -> Option<Dims> {
        let permuted = self.axis_ops.apply_dims(self.input_dims);
        let mut c = [0; 3];
        for i in 0..3 {
            let a = t[i] as isize + self.offsets[i];
            if a < 0 || a >= permuted[i] as isize {
                return None;
            }
            let a = a as usize;
            c[self.axis_ops.permutation[i]] = if self.axis_ops.flip[i] { permuted[i] - 1 - a } else { a };
        }
        Some(c)
    }

    fn pull<T: Copy>(&self, src: &[T], fill: T) -> Vec<T> {
        let [d, h, w] = self.target_dims;
        let [_, sh, sw] = self.input_dims;
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push(match self.source_of([z, y, x]) {
                        Some([a, b, c]) => src[(a * sh + b) * sw + c],
                        None => fill,
                    });
                }
            }
        }
        out
    }

    /// Maps an original-grid label map onto the target grid.
    pub fn forward_labels(&self, m: &LabelMap) -> Result<LabelMap> {
        if m.dims != self.input_dims {
            return Err(Error::shape(format!("label map {:?} vs input {:?}", m.dims, self.input_dims)));
        }
        LabelMap::new(self.target_dims, self.pull(&m.data, 0), m.classes.clone())
    }

    /// Maps a target-grid label map back; cropped-away voxels become background.
    pub fn inverse_labels(&self, m: &LabelMap) -> Result<LabelMap> {
        if m.dims != self.target_dims {
            return Err(Error::shape(format!("label map {:?} vs target {:?}", m.dims, self.target_dims)));
        }
        let [_, h, w] = self.target_dims;
        let mut out = vec![0u16; voxels(self.input_dims)];
        let [_, sh, sw] = self.input_dims;
        for (i, &c) in m.data.iter().enumerate() {
            let t = [i / (h * w), i / w % h, i % w];
            if let Some([a, b, cc]) = self.source_of(t) {
                out[(a * sh + b) * sw + cc] = c;
            }
        }
        LabelMap::new(self.input_dims, out, m.classes.clone())
    }
}

/// Permutes/flips axes, rescales intensities to `[0, 1]` (a constant
/// volume becomes all zeros), then centre-crops or zero-pads to
/// `target_dims` (defaulting to the permuted dims).
pub fn preprocess(v: &Volume, target_dims: Option<Dims>, axis_ops: AxisOps) -> Result<(Volume, Transform)> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input volume".into()));
    }
    let target = target_dims.unwrap_or_else(|| axis_ops.apply_dims(v.dims));
    let t = Transform::new(v.dims, axis_ops, target)?;
    let (lo, hi) = v.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    let rescaled: Vec<f32> = if span > 0.0 {
        v.data.iter().map(|&x| ((x - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    let mut out = Volume::new(target, t.pull(&rescaled, 0.0))?;
    out.orientation = v.orientation.clone();
    out.value_range = Some((lo, hi));
    Ok((out, t))
}

/// Patch offsets along one axis: `0, s, 2s, ...` with the last offset
/// clamped to `dim - p` so the border is always covered.
pub fn make_grid(dim: usize, p: usize, s: usize) -> Result<Vec<usize>> {
    if p == 0 || p > dim {
        return Err(Error::config(format!("patch size {p} does not fit extent {dim}")));
    }
    if s == 0 || s > p {
        return Err(Error::config(format!("stride {s} must lie in 1..={p}")));
    }
    let last = dim - p;
    let mut offs: Vec<usize> = (0..=last).step_by(s).collect();
    if *offs.last().expect("offset 0") != last {
        offs.push(last);
    }
    Ok(offs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    pub offsets: [Vec<usize>; 3],
}

impl PatchGrid {
    pub fn new(dims: Dims, patch: usize, stride: usize) -> Result<Self> {
        Ok(PatchGrid {
            patch,
            stride,
            offsets: [make_grid(dims[0], patch, stride)?, make_grid(dims[1], patch, stride)?, make_grid(dims[2], patch, stride)?],
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch corners, `z` slowest.
    pub fn positions(&self) -> Vec<Dims> {
        let mut out = Vec::with_capacity(self.len());
        for &z in &self.offsets[0] {
            for &y in &self.offsets[1] {
                for &x in &self.offsets[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }
}

pub fn extract_patch(v: &Volume, at: Dims, p: usize) -> Result<Tensor<f32>> {
    if (0..3).any(|i| at[i] + p > v.dims[i]) {
        return Err(Error::shape(format!("patch {p} at {at:?} exceeds {:?}", v.dims)));
    }
    let mut out = Vec::with_capacity(p * p * p);
    for z in at[0]..at[0] + p {
        for y in at[1]..at[1] + p {
            let row = (z * v.dims[1] + y) * v.dims[2] + at[2];
            out.extend_from_slice(&v.data[row..row + p]);
        }
    }
    Tensor::from_vec(&[1, p, p, p], out)
}

pub fn extract_patches(v: &Volume, grid: &PatchGrid) -> Result<Vec<(Dims, Tensor<f32>)>> {
    grid.positions().into_iter().map(|at| Ok((at, extract_patch(v, at, grid.patch)?))).collect()
}

/// Running per-voxel sums of class probabilities.
#[derive(Debug, Clone)]
pub struct VoteAccumulator {
    dims: Dims,
    classes: usize,
    /// `[K, D*H*W]`.
    sums: Vec<f32>,
    covered: Vec<bool>,
}

impl VoteAccumulator {
    pub fn new(dims: Dims, classes: usize) -> Self {
        let n = voxels(dims);
        VoteAccumulator { dims, classes, sums: vec![0.0; classes * n], covered: vec![false; n] }
    }

    /// Adds probabilities `[K, p, p, p]` of the patch at `at`.
    pub fn add(&mut self, at: Dims, probs: &Tensor<f32>) -> Result<()> {
        let s = probs.shape();
        if s.len() != 4 || s[0] != self.classes || s[1] != s[2] || s[2] != s[3] {
            return Err(Error::shape(format!("patch probabilities {s:?} for {} classes", self.classes)));
        }
        let p = s[1];
        if (0..3).any(|i| at[i] + p > self.dims[i]) {
            return Err(Error::shape(format!("patch {p} at {at:?} exceeds {:?}", self.dims)));
        }
        let n = voxels(self.dims);
        let d = probs.data();
        let [_, h, w] = self.dims;
        for z in 0..p {
            for y in 0..p {
                let dst = ((at[0] + z) * h + at[1] + y) * w + at[2];
                let src = (z * p + y) * p;
                for c in 0..self.classes {
                    let (acc, row) = (&mut self.sums[c * n + dst..c * n + dst + p], &d[c * p * p * p + src..][..p]);
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                self.covered[dst..dst + p].iter_mut().for_each(|c| *c = true);
            }
        }
        Ok(())
    }

    /// Argmax per voxel, ties to the lowest class index.
    pub fn finish(self, classes: &ClassTable) -> Result<LabelMap> {
        if classes.len() != self.classes {
            return Err(Error::shape(format!("{} vote channels for a table of {}", self.classes, classes.len())));
        }
        if let Some(i) = self.covered.iter().position(|c| !c) {
            return Err(Error::Precondition(format!("voxel {i} is covered by no patch")));
        }
        let n = voxels(self.dims);
        let labels = (0..n)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.sums[c * n + v] > self.sums[best * n + v] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap::new(self.dims, labels, classes.clone())
    }
}

/// Sums patch probabilities in list order and takes the per-voxel argmax.
pub fn reconstruct_votes(patches: &[(Dims, Tensor<f32>)], out_dims: Dims, classes: &ClassTable) -> Result<LabelMap> {
    let mut acc = VoteAccumulator::new(out_dims, classes.len());
    for (at, probs) in patches {
        acc.add(*at, probs)?;
    }
    acc.finish(classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub stride: usize,
    /// Worker threads for patch inference.
    pub threads: usize,
    /// Model grid; defaults to the permuted input dims, grown to the patch size.
    pub target_dims: Option<Dims>,
    pub axis_ops: AxisOps,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { stride: 16, threads: 1, target_dims: None, axis_ops: AxisOps::default() }
    }
}

impl SegmentConfig {
    fn target(&self, v: &Volume, patch: usize) -> Dims {
        self.target_dims.unwrap_or_else(|| self.axis_ops.apply_dims(v.dims).map(|d| d.max(patch)))
    }
}

/// Class table stored with a model, or `0..K` identity labels.
pub fn model_class_table(model: &Model<f32>) -> Result<ClassTable> {
    match model.meta.get("class_table") {
        Some(t) => {
            let table: ClassTable = serde_json::from_value(t.clone())?;
            if table.len() != model.config.n_classes {
                return Err(Error::shape(format!(
                    "model emits {} classes but its table has {}",
                    model.config.n_classes,
                    table.len()
                )));
            }
            Ok(table)
        }
        None => Ok(ClassTable::identity(model.config.n_classes)),
    }
}

/// Eval-mode probabilities for one patch, without gradient tracking.
pub fn predict_patch(model: &Model<f32>, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let _g = no_grad();
    model.forward(patch, &mut ForwardCtx::eval())
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// In the geometry of the input volume.
    pub labels: LabelMap,
    pub n_patches: usize,
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Preprocess, run the model on every grid patch, reconstruct by voting
/// and map back to the input geometry. The result does not depend on
/// `threads`: patch results are reduced in grid order.
pub fn segment_volume(model: &Model<f32>, v: &Volume, classes: &ClassTable, cfg: &SegmentConfig) -> Result<Segmentation> {
    if model.config.n_classes != classes.len() {
        return Err(Error::shape(format!(
            "model emits {} classes, class table has {}",
            model.config.n_classes,
            classes.len()
        )));
    }
    let p = model.config.patch_size;
    let (pre, transform) = preprocess(v, Some(cfg.target(v, p)), cfg.axis_ops)?;
    let grid = PatchGrid::new(pre.dims, p, cfg.stride)?;
    let positions = grid.positions();
    let pool = thread_pool(cfg.threads)?;
    let mut acc = VoteAccumulator::new(pre.dims, classes.len());
    let batch = cfg.threads.max(1);
    for chunk in positions.chunks(batch) {
        let probs: Vec<Result<Tensor<f32>>> = pool.install(|| {
            chunk.par_iter().map(|&at| predict_patch(model, &extract_patch(&pre, at, p)?)).collect()
        });
        for (&at, pr) in chunk.iter().zip(probs) {
            acc.add(at, &pr?)?;
        }
    }
    let mut labels = transform.inverse_labels(&acc.finish(classes)?)?;
    labels.orientation = v.orientation.clone();
    labels.nifti_header = v.nifti_header.clone();
    Ok(Segmentation { labels, n_patches: positions.len() })
}

/// Corner of the `p`-cube centred on the bounding box of both hippocampus
/// classes, clamped into the volume, and the extracted patch.
pub fn hippocampus_crop(seg: &LabelMap, v: &Volume, p: usize) -> Result<(Dims, Tensor<f32>)> {
    if seg.dims != v.dims {
        return Err(Error::shape(format!("segmentation {:?} vs volume {:?}", seg.dims, v.dims)));
    }
    if v.dims.iter().any(|&d| d < p) {
        return Err(Error::Precondition(format!("volume {:?} smaller than the {p}-voxel crop", v.dims)));
    }
    let mut targets = seg.classes.with_role(ClassRole::HippocampusLeft);
    targets.extend(seg.classes.with_role(ClassRole::HippocampusRight));
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let [_, h, w] = seg.dims;
    let mut found = false;
    for (i, &c) in seg.data.iter().enumerate() {
        if targets.contains(&(c as usize)) {
            found = true;
            let q = [i / (h * w), i / w % h, i % w];
            for a in 0..3 {
                lo[a] = lo[a].min(q[a]);
                hi[a] = hi[a].max(q[a]);
            }
        }
    }
    if !found {
        return Err(Error::Precondition("no hippocampus voxels in the segmentation".into()));
    }
    if (0..3).any(|a| hi[a] - lo[a] + 1 > p) {
        return Err(Error::Precondition(format!(
            "hippocampus bounding box {lo:?}..={hi:?} does not fit a {p}-voxel crop"
        )));
    }
    let at = [0, 1, 2].map(|a| {
        let centred = (lo[a] + hi[a] + 1) as isize - p as isize;
        (centred.div_euclid(2)).clamp(0, (v.dims[a] - p) as isize) as usize
    });
    Ok((at, extract_patch(v, at, p)?))
}

/// Second-stage pipeline: one patch around the hippocampus, segmented by
/// `model` and placed into a background map of the input geometry.
pub fn segment_hippocampus(
    model: &Model<f32>,
    v: &Volume,
    seg: &LabelMap,
    classes: &ClassTable,
    cfg: &SegmentConfig,
) -> Result<LabelMap> {
    if model.config.n_classes != classes.len() {
        return Err(Error::shape(format!(
            "model emits {} classes, class table has {}",
            model.config.n_classes,
            classes.len()
        )));
    }
    let p = model.config.patch_size;
    let (pre, transform) = preprocess(v, Some(cfg.target(v, p)), cfg.axis_ops)?;
    let seg_t = transform.forward_labels(seg)?;
    let (at, patch) = hippocampus_crop(&seg_t, &pre, p)?;
    let probs = predict_patch(model, &patch)?;
    let mut acc = VoteAccumulator::new([p; 3], classes.len());
    acc.add([0; 3], &probs)?;
    let local = acc.finish(classes)?;
    let mut full = LabelMap::background(pre.dims, classes.clone());
    let [_, h, w] = pre.dims;
    for z in 0..p {
        for y in 0..p {
            let dst = ((at[0] + z) * h + at[1] + y) * w + at[2];
            full.data[dst..dst + p].copy_from_slice(&local.data[(z * p + y) * p..][..p]);
        }
    }
    let mut out = transform.inverse_labels(&full)?;
    out.orientation = v.orientation.clone();
    out.nifti_header = v.nifti_header.clone();
    Ok(out)
}
