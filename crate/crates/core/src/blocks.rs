//! Bottleneck blocks: the eight-path 3D selective-scan module, the block
//! wrapping it, and the tri-oriented gated comparator block.
//!
//! Blocks work on channels-last tokens `[L, C]` internally; `forward`
//! accepts and returns `[C, D, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::nn::{join, Conv3d, ForwardCtx, LayerNorm, Linear, Params};
use crate::paths::{cached_group_paths, Dims, GROUPS, VARIANTS};
use crate::s6::{compute_gates, selective_scan, ScanKernel, S6Params};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters shared by both block kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub state_dim: usize,
    /// Rank of the step-size projection.
    pub dt_rank: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub drop_path: f64,
    pub kernel: ScanKernel,
}

impl BlockConfig {
    pub fn new(channels: usize, state_dim: usize) -> Self {
        BlockConfig {
            channels,
            state_dim,
            dt_rank: crate::s6::default_dt_rank(channels),
            mlp_ratio: 2,
            dropout: 0.0,
            drop_path: 0.0,
            kernel: ScanKernel::Sequential,
        }
    }
}

fn s6_apply<T: Scalar>(x: &Tensor<T>, p: &S6Params<T>, kernel: ScanKernel) -> Result<Tensor<T>> {
    let g = compute_gates(x, p)?;
    selective_scan(x, &g.delta, &p.state_matrix(), &g.b, &g.c, &p.d_skip, kernel)
}

fn dims_of<T: Scalar>(x: &Tensor<T>) -> Result<Dims> {
    match x.shape() {
        [_, d, h, w] => Ok([*d, *h, *w]),
        s => Err(Error::shape(format!("expected [C, D, H, W], got {s:?}"))),
    }
}

/// Eight independent selective scans along the paths of one orientation
/// group, merged by summation.
#[derive(Debug, Clone)]
pub struct SS3DModule<T: Scalar> {
    pub group: usize,
    /// One per path variant `0..8`.
    pub branches: Vec<S6Params<T>>,
    pub kernel: ScanKernel,
}

impl<T: Scalar> SS3DModule<T> {
    pub fn new(group: usize, cfg: &BlockConfig, rng: &mut InitRng) -> Self {
        assert!(group < GROUPS, "orientation group {group}");
        SS3DModule {
            group,
            branches: (0..VARIANTS)
                .map(|_| S6Params::init(cfg.channels, cfg.state_dim, cfg.dt_rank, rng))
                .collect(),
            kernel: cfg.kernel,
        }
    }

    pub fn channels(&self) -> usize {
        self.branches[0].channels
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = dims_of(x)?;
        self.forward_tokens(&x.channels_last()?, dims)?.channels_first(dims)
    }

    pub fn forward_tokens(&self, x: &Tensor<T>, dims: Dims) -> Result<Tensor<T>> {
        self.forward_scheduled(x, dims, &[0, 1, 2, 3, 4, 5, 6, 7])
    }

    /// Evaluates the branches in the order given by `schedule` (a
    /// permutation of `0..8`); the merge always runs in variant order.
    pub fn forward_scheduled(&self, x: &Tensor<T>, dims: Dims, schedule: &[usize]) -> Result<Tensor<T>> {
        if x.ndim() != 2 || x.shape()[1] != self.channels() {
            return Err(Error::shape(format!(
                "ss3d: tokens {:?} for {} channels",
                x.shape(),
                self.channels()
            )));
        }
        let mut seen = [false; VARIANTS];
        if schedule.len() != VARIANTS || !schedule.iter().all(|&v| v < VARIANTS && !std::mem::replace(&mut seen[v], true)) {
            return Err(Error::config(format!("ss3d: schedule {schedule:?} is not a permutation of 0..8")));
        }
        let paths = cached_group_paths(dims, self.group)?;
        let mut outs: Vec<Option<Tensor<T>>> = vec![None; VARIANTS];
        for &v in schedule {
            let order = &paths[v].order;
            let y = s6_apply(&x.gather_rows(order)?, &self.branches[v], self.kernel)?;
            outs[v] = Some(y.scatter_rows(order)?);
        }
        let mut outs = outs.into_iter().map(|o| o.expect("every branch scheduled"));
        let first = outs.next().expect("eight branches");
        outs.try_fold(first, |acc, y| acc.add(&y))
    }
}

impl<T: Scalar> Params<T> for SS3DModule<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (v, b) in self.branches.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("branch{v}")), out);
        }
    }
}

/// Two-layer perceptron with SiLU and hidden dropout.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    /// Zero-initialised.
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    fn new(channels: usize, ratio: usize, rng: &mut InitRng) -> Self {
        Mlp {
            fc1: Linear::new(rng, channels, channels * ratio, true),
            fc2: Linear::zeroed(channels * ratio, channels, true),
        }
    }

    fn forward(&self, x: &Tensor<T>, dropout: f64, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let h = ctx.dropout(&self.fc1.forward(x)?.silu(), dropout)?;
        self.fc2.forward(&h)
    }
}

impl<T: Scalar> Params<T> for Mlp<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }
}

/// `x + branch(x)` with stochastic depth.
fn residual<T: Scalar>(
    x: &Tensor<T>,
    drop_path: f64,
    ctx: &mut ForwardCtx,
    branch: impl FnOnce(&mut ForwardCtx) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if ctx.drop_branch(drop_path) {
        return Ok(x.clone());
    }
    let y = branch(ctx)?;
    x.add(&ctx.branch_scale(y, drop_path))
}

/// Scan block: a selective-scan residual module followed by an MLP
/// residual module.
#[derive(Debug, Clone)]
pub struct VSS3DBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub in_proj: Linear<T>,
    /// Depthwise 3x3x3.
    pub dwconv: Conv3d<T>,
    pub ss3d: SS3DModule<T>,
    pub norm2: LayerNorm<T>,
    /// Zero-initialised.
    pub out_proj: Linear<T>,
    pub norm3: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub dropout: f64,
    pub drop_path: f64,
}

impl<T: Scalar> VSS3DBlock<T> {
    pub fn new(group: usize, cfg: &BlockConfig, rng: &mut InitRng) -> Self {
        let c = cfg.channels;
        VSS3DBlock {
            norm1: LayerNorm::new(c),
            in_proj: Linear::new(rng, c, c, true),
            dwconv: Conv3d::new(rng, c, c, 3, c, true),
            ss3d: SS3DModule::new(group, cfg, rng),
            norm2: LayerNorm::new(c),
            out_proj: Linear::zeroed(c, c, true),
            norm3: LayerNorm::new(c),
            mlp: Mlp::new(c, cfg.mlp_ratio, rng),
            dropout: cfg.dropout,
            drop_path: cfg.drop_path,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let dims = dims_of(x)?;
        self.forward_tokens(&x.channels_last()?, dims, ctx)?.channels_first(dims)
    }

    pub fn forward_tokens(&self, x: &Tensor<T>, dims: Dims, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let x1 = residual(x, self.drop_path, ctx, |ctx| {
            let h = self.in_proj.forward(&self.norm1.forward(x)?)?;
            let h = self.dwconv.forward(&h.channels_first(dims)?)?.channels_last()?.silu();
            let h = self.norm2.forward(&self.ss3d.forward_tokens(&h, dims)?)?;
            ctx.dropout(&self.out_proj.forward(&h)?, self.dropout)
        })?;
        residual(&x1, self.drop_path, ctx, |ctx| {
            self.mlp.forward(&self.norm3.forward(&x1)?, self.dropout, ctx)
        })
    }
}

impl<T: Scalar> Params<T> for VSS3DBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.in_proj.collect_params(&join(prefix, "in_proj"), out);
        self.dwconv.collect_params(&join(prefix, "dwconv"), out);
        self.ss3d.collect_params(&join(prefix, "ss3d"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.out_proj.collect_params(&join(prefix, "out_proj"), out);
        self.norm3.collect_params(&join(prefix, "norm3"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
    }
}

pub const MAMBA_EXPAND: usize = 2;
pub const MAMBA_CONV: usize = 4;

/// Per-ordering parameters of the gated block.
#[derive(Debug, Clone)]
pub struct Direction<T: Scalar> {
    /// `[E, k]` causal depthwise kernel.
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub s6: S6Params<T>,
}

/// The three token orderings of a `D x H x W` grid: raster, reversed
/// raster, and raster of the grid transposed to `H x W x D`.
pub fn tri_orders(dims: Dims) -> [Vec<usize>; 3] {
    let [d, h, w] = dims;
    let raster: Vec<usize> = (0..d * h * w).collect();
    let reversed = raster.iter().rev().copied().collect();
    let mut transposed = Vec::with_capacity(raster.len());
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                transposed.push((z * h + y) * w + x);
            }
        }
    }
    [raster, reversed, transposed]
}

/// Gated selective-scan block with expansion 2, applied to three
/// orderings whose outputs are summed before gating.
#[derive(Debug, Clone)]
pub struct GatedMamba<T: Scalar> {
    /// `C -> 2E`, no bias; halves are the scan input and the gate.
    pub in_proj: Linear<T>,
    pub directions: Vec<Direction<T>>,
    /// `E -> C`, zero-initialised, no bias.
    pub out_proj: Linear<T>,
    pub kernel: ScanKernel,
}

impl<T: Scalar> GatedMamba<T> {
    pub fn new(cfg: &BlockConfig, rng: &mut InitRng) -> Self {
        let (c, e) = (cfg.channels, cfg.channels * MAMBA_EXPAND);
        GatedMamba {
            in_proj: Linear::new(rng, c, 2 * e, false),
            directions: (0..3)
                .map(|_| Direction {
                    conv_w: init::fan_in(rng, &[e, MAMBA_CONV], MAMBA_CONV),
                    conv_b: init::fan_in(rng, &[e], MAMBA_CONV),
                    s6: S6Params::init(e, cfg.state_dim, cfg.dt_rank, rng),
                })
                .collect(),
            out_proj: Linear::zeroed(e, c, false),
            kernel: cfg.kernel,
        }
    }

    pub fn forward_tokens(&self, x: &Tensor<T>, dims: Dims) -> Result<Tensor<T>> {
        let e = self.directions[0].s6.channels;
        let xz = self.in_proj.forward(x)?;
        let (u, z) = (xz.narrow_cols(0, e)?, xz.narrow_cols(e, e)?);
        let orders = tri_orders(dims);
        let mut acc: Option<Tensor<T>> = None;
        for (dir, order) in self.directions.iter().zip(&orders) {
            let s = u.gather_rows(order)?.causal_conv1d(&dir.conv_w, &dir.conv_b)?.silu();
            let y = s6_apply(&s, &dir.s6, self.kernel)?.scatter_rows(order)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y)?,
            });
        }
        let gated = acc.expect("three orderings").mul(&z.silu())?;
        self.out_proj.forward(&gated)
    }
}

impl<T: Scalar> Params<T> for GatedMamba<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.in_proj.collect_params(&join(prefix, "in_proj"), out);
        for (i, d) in self.directions.iter().enumerate() {
            let p = join(prefix, &format!("dir{i}"));
            out.push((join(&p, "conv_w"), d.conv_w.clone()));
            out.push((join(&p, "conv_b"), d.conv_b.clone()));
            d.s6.collect_params(&join(&p, "s6"), out);
        }
        self.out_proj.collect_params(&join(prefix, "out_proj"), out);
    }
}

/// Comparator block: the gated tri-oriented module in place of the
/// selective-scan module, same MLP module.
#[derive(Debug, Clone)]
pub struct TriOrientedBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub mamba: GatedMamba<T>,
    pub norm3: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub dropout: f64,
    pub drop_path: f64,
}

impl<T: Scalar> TriOrientedBlock<T> {
    pub fn new(cfg: &BlockConfig, rng: &mut InitRng) -> Self {
        TriOrientedBlock {
            norm1: LayerNorm::new(cfg.channels),
            mamba: GatedMamba::new(cfg, rng),
            norm3: LayerNorm::new(cfg.channels),
            mlp: Mlp::new(cfg.channels, cfg.mlp_ratio, rng),
            dropout: cfg.dropout,
            drop_path: cfg.drop_path,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let dims = dims_of(x)?;
        self.forward_tokens(&x.channels_last()?, dims, ctx)?.channels_first(dims)
    }

    pub fn forward_tokens(&self, x: &Tensor<T>, dims: Dims, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let x1 = residual(x, self.drop_path, ctx, |ctx| {
            let h = self.mamba.forward_tokens(&self.norm1.forward(x)?, dims)?;
            ctx.dropout(&h, self.dropout)
        })?;
        residual(&x1, self.drop_path, ctx, |ctx| {
            self.mlp.forward(&self.norm3.forward(&x1)?, self.dropout, ctx)
        })
    }
}

impl<T: Scalar> Params<T> for TriOrientedBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.mamba.collect_params(&join(prefix, "mamba"), out);
        self.norm3.collect_params(&join(prefix, "norm3"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
    }
}

/// A bottleneck block of either kind.
#[derive(Debug, Clone)]
pub enum Block<T: Scalar> {
    Scan(VSS3DBlock<T>),
    Tri(TriOrientedBlock<T>),
}

impl<T: Scalar> Block<T> {
    pub fn forward_tokens(&self, x: &Tensor<T>, dims: Dims, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        match self {
            Block::Scan(b) => b.forward_tokens(x, dims, ctx),
            Block::Tri(b) => b.forward_tokens(x, dims, ctx),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        match self {
            Block::Scan(b) => b.forward(x, ctx),
            Block::Tri(b) => b.forward(x, ctx),
        }
    }

    /// Orientation group of the inner scan module, if any.
    pub fn orientation(&self) -> Option<usize> {
        match self {
            Block::Scan(b) => Some(b.ss3d.group),
            Block::Tri(_) => None,
        }
    }
}

impl<T: Scalar> Params<T> for Block<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        match self {
            Block::Scan(b) => b.collect_params(prefix, out),
            Block::Tri(b) => b.collect_params(prefix, out),
        }
    }
}
