//! Losses, learning-rate schedule, AdamW, the gradient-accumulation
//! training loop and synthetic data.

mod loss;
mod optim;
mod synth;

pub use loss::{
    combined_loss, dice_loss, median_frequency_weights, one_hot, weighted_cross_entropy, LossSchedule, DICE_EPS,
    LOG_FLOOR,
};
pub use optim::{AdamW, CosineWarmRestarts, ADAM_BETAS, ADAM_EPS};
pub use synth::{
    gen_synthetic, read_dataset, write_dataset, Dataset, Ellipsoid, Manifest, ManifestEntry, Sample, SyntheticSpec,
    CLASSES_FILE, MANIFEST_FILE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Checkpoint, CheckpointTensor, Model};
use crate::nn::{ForwardCtx, Params};
use crate::paths::Dims;
use crate::pipeline::{extract_patch, preprocess, AxisOps, ClassTable, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Steps to the first restart; one epoch of steps when unset.
    pub t0: Option<usize>,
    pub t_mult: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Patches per optimizer step; one scan's patch set when unset.
    pub accumulation_count: Option<usize>,
    pub seed: u64,
    pub loss_schedule: LossSchedule,
    /// WCE weights; median-frequency balancing over the training maps when unset.
    pub class_weights: Option<Vec<f64>>,
    pub patches_per_axis: usize,
    /// Draw patch corners uniformly instead of using the fixed grid.
    pub random_offsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-6,
            t0: None,
            t_mult: 2,
            weight_decay: 1e-2,
            epochs: 15,
            accumulation_count: None,
            seed: 0,
            loss_schedule: LossSchedule::default(),
            class_weights: None,
            patches_per_axis: 3,
            random_offsets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule(1).validate()?;
        if self.accumulation_count == Some(0) {
            return Err(Error::config("accumulation_count must be at least 1"));
        }
        if self.patches_per_axis == 0 {
            return Err(Error::config("patches_per_axis must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> CosineWarmRestarts {
        CosineWarmRestarts {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            t0: self.t0.unwrap_or(steps_per_epoch.max(1)),
            t_mult: self.t_mult,
        }
    }
}

/// `n` evenly spaced patch corners covering `[0, dim)`.
pub fn training_offsets(dim: usize, p: usize, n: usize) -> Result<Vec<usize>> {
    if p == 0 || p > dim || n == 0 {
        return Err(Error::config(format!("cannot place {n} patches of {p} in {dim}")));
    }
    let span = dim - p;
    if n == 1 {
        return Ok(vec![span / 2]);
    }
    let mut v: Vec<usize> = (0..n).map(|i| (i * span + (n - 1) / 2) / (n - 1)).collect();
    v.dedup();
    Ok(v)
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    /// Scan of the last patch in the accumulation window.
    pub scan_id: String,
    /// Mean patch loss over the window.
    pub loss: f64,
    pub lr: f64,
}

struct Prepared {
    id: String,
    volume: Volume,
    labels: Vec<u16>,
}

/// Training state bound to one model. Checkpoints carry the optimizer
/// moments and step counters so a run resumes at an epoch boundary with
/// an identical trajectory.
pub struct Trainer<'m> {
    pub model: &'m Model<f32>,
    pub config: TrainConfig,
    pub optimizer: AdamW<f32>,
    pub classes: ClassTable,
    pub class_weights: Vec<f64>,
    pub step: usize,
    pub epochs_done: usize,
    data: Vec<Prepared>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedState {
    step: usize,
    epochs_done: usize,
    adam_t: u64,
    config: TrainConfig,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model<f32>, dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.samples.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        let k = model.config.n_classes;
        if dataset.classes.len() != k {
            return Err(Error::shape(format!("model emits {k} classes, dataset has {}", dataset.classes.len())));
        }
        let p = model.config.patch_size;
        let mut data = Vec::with_capacity(dataset.samples.len());
        for s in &dataset.samples {
            if s.volume.dims != s.labels.dims {
                return Err(Error::shape(format!("{}: image {:?} vs labels {:?}", s.id, s.volume.dims, s.labels.dims)));
            }
            let target = s.volume.dims.map(|d| d.max(p));
            let (volume, t) = preprocess(&s.volume, Some(target), AxisOps::default())?;
            let labels = t.forward_labels(&s.labels)?.data;
            data.push(Prepared { id: s.id.clone(), volume, labels });
        }
        let class_weights = match &config.class_weights {
            Some(w) if w.len() != k => {
                return Err(Error::config(format!("{} class weights for {k} classes", w.len())));
            }
            Some(w) if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) => {
                return Err(Error::config("class weights must be positive"));
            }
            Some(w) => w.clone(),
            None => median_frequency_weights(data.iter().map(|d| d.labels.as_slice()), k),
        };
        let optimizer = AdamW::new(model.named_parameters(""), config.weight_decay);
        Ok(Trainer {
            model,
            config,
            optimizer,
            classes: dataset.classes.clone(),
            class_weights,
            step: 0,
            epochs_done: 0,
            data,
        })
    }

    /// `(scan, corner)` for every training patch of an epoch, scans in order.
    pub fn epoch_patches(&self, epoch: usize) -> Result<Vec<(usize, Dims)>> {
        let p = self.model.config.patch_size;
        let n = self.config.patches_per_axis;
        let mut out = Vec::new();
        for (i, d) in self.data.iter().enumerate() {
            let axes: Vec<Vec<usize>> = if self.config.random_offsets {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch as u64, i as u64));
                d.volume.dims.iter().map(|&dim| (0..n).map(|_| rng.gen_range(0..=dim - p)).collect()).collect()
            } else {
                d.volume.dims.iter().map(|&dim| training_offsets(dim, p, n)).collect::<Result<_>>()?
            };
            for &z in &axes[0] {
                for &y in &axes[1] {
                    for &x in &axes[2] {
                        out.push((i, [z, y, x]));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn window(&self) -> Result<usize> {
        match self.config.accumulation_count {
            Some(a) => Ok(a),
            None => Ok(self.epoch_patches(0)?.len() / self.data.len()),
        }
    }

    pub fn steps_per_epoch(&self) -> Result<usize> {
        Ok(self.epoch_patches(0)?.len().div_ceil(self.window()?))
    }

    pub fn schedule(&self) -> Result<CosineWarmRestarts> {
        Ok(self.config.schedule(self.steps_per_epoch()?))
    }

    fn label_patch(&self, scan: usize, at: Dims) -> Vec<u16> {
        let p = self.model.config.patch_size;
        let d = &self.data[scan];
        let [_, h, w] = d.volume.dims;
        let mut out = Vec::with_capacity(p * p * p);
        for z in at[0]..at[0] + p {
            for y in at[1]..at[1] + p {
                let row = (z * h + y) * w + at[2];
                out.extend_from_slice(&d.labels[row..row + p]);
            }
        }
        out
    }

    /// Loss of one patch in training mode, without recording a graph.
    pub fn patch_loss(&self, epoch: usize, scan: usize, at: Dims, ctx_seed: u64) -> Result<f64> {
        let _g = crate::tensor::no_grad();
        Ok(self.forward_loss(epoch, scan, at, ctx_seed)?.item() as f64)
    }

    fn forward_loss(&self, epoch: usize, scan: usize, at: Dims, ctx_seed: u64) -> Result<crate::tensor::Tensor<f32>> {
        let p = self.model.config.patch_size;
        let x = extract_patch(&self.data[scan].volume, at, p)?;
        let probs = self.model.forward(&x, &mut ForwardCtx::train(ctx_seed))?;
        combined_loss(epoch, self.config.loss_schedule, &probs, &self.label_patch(scan, at), &self.class_weights)
    }

    /// Runs the next epoch. Gradients of each window are averaged over its
    /// patches before a single optimizer step.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        let epoch = self.epochs_done;
        let patches = self.epoch_patches(epoch)?;
        let window = self.window()?;
        let schedule = self.schedule()?;
        for chunk in patches.chunks(window) {
            self.optimizer.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            for (j, &(scan, at)) in chunk.iter().enumerate() {
                let loss = self.forward_loss(epoch, scan, at, mix(self.config.seed, self.step as u64, j as u64))?;
                let value = loss.item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at step {}, epoch {epoch}, scan {}",
                        self.step, self.data[scan].id
                    )));
                }
                loss.mul_scalar(scale).backward()?;
                total += value;
            }
            let lr = schedule.lr_at(self.step);
            self.optimizer.step(lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", self.step)),
                e => e,
            })?;
            let scan = chunk.last().map(|&(s, _)| s).unwrap_or(0);
            let record =
                LogRecord { step: self.step, epoch, scan_id: self.data[scan].id.clone(), loss: total * scale, lr };
            self.step += 1;
            on_step(&record)?;
        }
        self.optimizer.zero_grad();
        self.epochs_done += 1;
        Ok(())
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&LogRecord) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer<'m>) -> Result<()>,
    ) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            self.run_epoch(&mut on_step)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// Model parameters, optimizer moments (`adam.m.*`, `adam.v.*`),
    /// the class table and the step counters.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_model(self.model);
        for (((name, p), m), v) in self.optimizer.params.iter().zip(&self.optimizer.m).zip(&self.optimizer.v) {
            let shape = p.shape().to_vec();
            ckpt.tensors.push(CheckpointTensor { name: format!("adam.m.{name}"), shape: shape.clone(), data: m.clone() });
            ckpt.tensors.push(CheckpointTensor { name: format!("adam.v.{name}"), shape, data: v.clone() });
        }
        let state = SavedState {
            step: self.step,
            epochs_done: self.epochs_done,
            adam_t: self.optimizer.t,
            config: self.config.clone(),
        };
        let mut meta = match &ckpt.meta {
            serde_json::Value::Object(m) => m.clone(),
            _ => serde_json::Map::new(),
        };
        meta.insert("class_table".into(), serde_json::to_value(&self.classes)?);
        meta.insert("train_state".into(), serde_json::to_value(state)?);
        ckpt.meta = serde_json::Value::Object(meta);
        Ok(ckpt)
    }

    /// Restores optimizer moments and counters from a checkpoint written by
    /// [`Trainer::checkpoint`]. The model must already hold its parameters.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let state: SavedState = serde_json::from_value(
            ckpt.meta.get("train_state").cloned().ok_or_else(|| Error::Format("checkpoint has no training state".into()))?,
        )?;
        for (((name, p), m), v) in self.optimizer.params.iter().zip(&mut self.optimizer.m).zip(&mut self.optimizer.v) {
            for (prefix, dst) in [("adam.m", m), ("adam.v", v)] {
                let key = format!("{prefix}.{name}");
                let t = ckpt.tensor(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                if t.shape != p.shape() {
                    return Err(Error::shape(format!("{key}: {:?} vs {:?}", t.shape, p.shape())));
                }
                dst.clone_from(&t.data);
            }
        }
        self.optimizer.t = state.adam_t;
        self.step = state.step;
        self.epochs_done = state.epochs_done;
        Ok(())
    }
}

/// Trains for `config.epochs` epochs and returns the log.
pub fn train(model: &Model<f32>, dataset: &Dataset, config: TrainConfig) -> Result<Vec<LogRecord>> {
    let mut trainer = Trainer::new(model, dataset, config)?;
    let mut log = Vec::new();
    trainer.run(
        |r| {
            log.push(r.clone());
            Ok(())
        },
        |_| Ok(()),
    )?;
    Ok(log)
}
