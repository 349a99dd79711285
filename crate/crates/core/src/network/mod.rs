//! Encoder / bottleneck / decoder segmentation network.
//!
//! ```text
//! x [in, s]     -> res(in -> w0)                      = e0   [w0, s]
//!               -> pool -> res(w0 -> w1)              = e1   [w1, s/2]
//!               -> pool -> res(w1 -> w2)              = e2   [w2, s/4]
//!               -> pool -> res(w2 -> w3)              = e3   [w3, s/8]
//!               -> conv3(w3 -> b) -> blocks -> layer norm    [b,  s/8]
//! decoder, level 2, 1, 0:
//!   h -> up2 -> conv3(-> w_i) -> merge with e_i -> res(w_i -> w_i)
//! head: conv1(w0 -> K) -> softmax over classes
//! ```

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointTensor,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockConfig, TriOrientedBlock, VSS3DBlock};
use crate::error::{Error, Result};
use crate::init::InitRng;
use crate::nn::{join, Conv3d, ForwardCtx, GroupNorm, LayerNorm, Params};
use crate::paths::GROUPS;
use crate::s6::ScanKernel;
use crate::tensor::{concat_channels, max_pool3d, softmax_channel, upsample_nearest2x, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    Vss3d,
    TriOriented,
}

/// How decoder features are combined with the encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Concatenate, then reduce with a 1x1x1 convolution.
    #[default]
    Concat,
    /// Elementwise sum.
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Encoder stage widths, four entries.
    pub channel_schedule: Vec<usize>,
    pub bottleneck_channels: usize,
    pub n_bottleneck_blocks: usize,
    pub bottleneck_kind: BottleneckKind,
    pub state_dim: usize,
    /// Step-size projection rank; `None` means `max(1, C/16)`.
    #[serde(default)]
    pub dt_rank: Option<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub gn_groups: usize,
    pub dropout: f64,
    /// Largest drop-path rate; rates ramp linearly from 0 over the blocks.
    pub drop_path: f64,
    pub patch_size: usize,
    #[serde(default)]
    pub skip_mode: SkipMode,
    #[serde(default)]
    pub scan_kernel: ScanKernel,
}

fn default_mlp_ratio() -> usize {
    2
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            in_channels: 1,
            channel_schedule: vec![64, 128, 256, 512],
            bottleneck_channels: 1024,
            n_bottleneck_blocks: 9,
            bottleneck_kind: BottleneckKind::Vss3d,
            state_dim: 64,
            dt_rank: None,
            mlp_ratio: 2,
            n_classes: 32,
            gn_groups: 8,
            dropout: 0.1,
            drop_path: 0.3,
            patch_size: 96,
            skip_mode: SkipMode::Concat,
            scan_kernel: ScanKernel::Sequential,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            channel_schedule: vec![8, 16, 32, 64],
            bottleneck_channels: 128,
            n_bottleneck_blocks: 3,
            state_dim: 16,
            n_classes: 8,
            gn_groups: 4,
            patch_size: 32,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.channel_schedule.len() != 4 {
            return bad(format!("channel_schedule needs 4 widths, got {:?}", self.channel_schedule));
        }
        if self.in_channels == 0 || self.bottleneck_channels == 0 || self.state_dim == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, bottleneck_channels, state_dim and mlp_ratio must be positive".into());
        }
        if self.gn_groups == 0 {
            return bad("gn_groups must be positive".into());
        }
        for &w in &self.channel_schedule {
            if w == 0 || w % self.gn_groups != 0 {
                return bad(format!("stage width {w} not divisible by gn_groups {}", self.gn_groups));
            }
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return bad(format!("patch_size {} must be a positive multiple of 8", self.patch_size));
        }
        if self.dt_rank == Some(0) {
            return bad("dt_rank must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.drop_path) {
            return bad("dropout and drop_path must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Drop-path rate of bottleneck block `i`.
    pub fn drop_path_rate(&self, i: usize) -> f64 {
        if self.n_bottleneck_blocks <= 1 {
            0.0
        } else {
            self.drop_path * i as f64 / (self.n_bottleneck_blocks - 1) as f64
        }
    }

    fn block_config(&self, i: usize) -> BlockConfig {
        let c = self.bottleneck_channels;
        BlockConfig {
            channels: c,
            state_dim: self.state_dim,
            dt_rank: self.dt_rank.unwrap_or_else(|| crate::s6::default_dt_rank(c)),
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            drop_path: self.drop_path_rate(i),
            kernel: self.scan_kernel,
        }
    }
}

/// Two conv / group-norm / ReLU stages plus a shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Scalar> {
    pub conv1: Conv3d<T>,
    pub norm1: GroupNorm<T>,
    pub conv2: Conv3d<T>,
    pub norm2: GroupNorm<T>,
    /// 1x1x1 projection when the widths differ.
    pub shortcut: Option<Conv3d<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(cin: usize, cout: usize, gn_groups: usize, rng: &mut InitRng) -> Self {
        ResidualBlock {
            conv1: Conv3d::new(rng, cin, cout, 3, 1, true),
            norm1: GroupNorm::new(cout, gn_groups),
            conv2: Conv3d::new(rng, cout, cout, 3, 1, true),
            norm2: GroupNorm::new(cout, gn_groups),
            shortcut: (cin != cout).then(|| Conv3d::new(rng, cin, cout, 1, 1, true)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu();
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?.relu();
        match &self.shortcut {
            Some(s) => h.add(&s.forward(x)?),
            None => h.add(x),
        }
    }
}

impl<T: Scalar> Params<T> for ResidualBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        if let Some(s) = &self.shortcut {
            s.collect_params(&join(prefix, "shortcut"), out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage<T: Scalar> {
    /// 3x3x3 after nearest 2x upsampling.
    pub up: Conv3d<T>,
    /// 1x1x1 reduction after concatenation (concat mode only).
    pub reduce: Option<Conv3d<T>>,
    pub block: ResidualBlock<T>,
}

impl<T: Scalar> Params<T> for DecoderStage<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.up.collect_params(&join(prefix, "up"), out);
        if let Some(r) = &self.reduce {
            r.collect_params(&join(prefix, "reduce"), out);
        }
        self.block.collect_params(&join(prefix, "block"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub seed: u64,
    pub encoder: Vec<ResidualBlock<T>>,
    pub pre_bottleneck: Conv3d<T>,
    pub blocks: Vec<Block<T>>,
    pub post_norm: LayerNorm<T>,
    /// Ordered from the coarsest level (2) to the finest (0).
    pub decoder: Vec<DecoderStage<T>>,
    pub head: Conv3d<T>,
    /// Free-form metadata carried through checkpoints (e.g. a class table).
    pub meta: serde_json::Value,
}

/// Deterministically initialises a model from `seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = InitRng::seed_from_u64(seed);
    let w = &cfg.channel_schedule;
    let g = cfg.gn_groups;
    let mut encoder = Vec::with_capacity(4);
    let mut cin = cfg.in_channels;
    for &width in w {
        encoder.push(ResidualBlock::new(cin, width, g, &mut rng));
        cin = width;
    }
    let bc = cfg.bottleneck_channels;
    let pre_bottleneck = Conv3d::new(&mut rng, w[3], bc, 3, 1, true);
    let blocks = (0..cfg.n_bottleneck_blocks)
        .map(|i| {
            let bcfg = cfg.block_config(i);
            match cfg.bottleneck_kind {
                BottleneckKind::Vss3d => Block::Scan(VSS3DBlock::new(i % GROUPS, &bcfg, &mut rng)),
                BottleneckKind::TriOriented => Block::Tri(TriOrientedBlock::new(&bcfg, &mut rng)),
            }
        })
        .collect();
    let mut decoder = Vec::with_capacity(3);
    let mut below = bc;
    for level in (0..3).rev() {
        let width = w[level];
        decoder.push(DecoderStage {
            up: Conv3d::new(&mut rng, below, width, 3, 1, true),
            reduce: (cfg.skip_mode == SkipMode::Concat).then(|| Conv3d::new(&mut rng, 2 * width, width, 1, 1, true)),
            block: ResidualBlock::new(width, width, g, &mut rng),
        });
        below = width;
    }
    Ok(Model {
        config: cfg.clone(),
        seed,
        encoder,
        pre_bottleneck,
        blocks,
        post_norm: LayerNorm::new(bc),
        decoder,
        head: Conv3d::new(&mut rng, w[0], cfg.n_classes, 1, 1, true),
        meta: serde_json::Value::Null,
    })
}

impl<T: Scalar> Model<T> {
    /// Class probabilities `[K, D, H, W]` for a patch `[in, D, H, W]`;
    /// every spatial extent must be a multiple of 8.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        Ok(softmax_channel(&self.logits(x, ctx)?))
    }

    pub fn logits(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.config.in_channels || s[1..].iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(Error::shape(format!(
                "model input must be [{}, D, H, W] with extents divisible by 8, got {s:?}",
                self.config.in_channels
            )));
        }
        let mut skips = Vec::with_capacity(3);
        let mut h = self.encoder[0].forward(x)?;
        for stage in &self.encoder[1..] {
            let pooled = max_pool3d(&h)?;
            skips.push(h);
            h = stage.forward(&pooled)?;
        }
        let b = self.pre_bottleneck.forward(&h)?;
        drop(h);
        let dims = [b.shape()[1], b.shape()[2], b.shape()[3]];
        let mut tokens = b.channels_last()?;
        drop(b);
        for block in &self.blocks {
            tokens = block.forward_tokens(&tokens, dims, ctx)?;
        }
        let mut h = self.post_norm.forward(&tokens)?.channels_first(dims)?;
        drop(tokens);
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = stage.up.forward(&upsample_nearest2x(&h)?)?;
            let merged = match &stage.reduce {
                Some(r) => r.forward(&concat_channels(&[&up, &skip])?)?,
                None => up.add(&skip)?,
            };
            h = stage.block.forward(&merged)?;
        }
        self.head.forward(&h)
    }

    /// Orientation group of each bottleneck block (`None` for blocks
    /// without a scan module).
    pub fn orientations(&self) -> Vec<Option<usize>> {
        self.blocks.iter().map(|b| b.orientation()).collect()
    }
}

impl<T: Scalar> Params<T> for Model<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, e) in self.encoder.iter().enumerate() {
            e.collect_params(&join(prefix, &format!("encoder{i}")), out);
        }
        self.pre_bottleneck.collect_params(&join(prefix, "pre_bottleneck"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("bottleneck{i}")), out);
        }
        self.post_norm.collect_params(&join(prefix, "post_norm"), out);
        for (i, d) in self.decoder.iter().enumerate() {
            d.collect_params(&join(prefix, &format!("decoder{}", 2 - i)), out);
        }
        self.head.collect_params(&join(prefix, "head"), out);
    }
}

/// Exact number of learnable scalars.
pub fn count_parameters<T: Scalar>(model: &Model<T>) -> usize {
    model.parameter_count()
}
