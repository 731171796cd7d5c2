//! Training loop: AdamW, global-norm clipping, plateau LR schedule and
//! best-validation retention.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, DiffusionConfig, NoiseSchedule};
use crate::rdt::{self, RdtModel};
use crate::rng;
use crate::signal::PairedSegment;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged { epoch: usize, step: u64, what: String },
    #[error(transparent)]
    Model(#[from] rdt::RdtError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_reduce_factor: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Training seed; `None` uses the run's master seed.
    pub seed: Option<u64>,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Fraction of training scenes held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            initial_lr: 1e-3,
            lr_reduce_factor: 0.5,
            patience: 5,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: None,
            checkpoint_every: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return bad("lr_reduce_factor must lie in (0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return bad("weight_decay must be >= 0 and grad_clip > 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 / (1.0 - self.beta1.powi(self.t as i32)) as f32;
        let c2 = 1.0 / (1.0 - self.beta2.powi(self.t as i32)) as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let (lr, eps) = (lr as f32, self.eps as f32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p = *p * decay - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    }
}

/// Scales `grad` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grad: &mut [f32], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    let scale = max_norm / (norm + 1e-6);
    if scale < 1.0 {
        for g in grad.iter_mut() {
            *g *= scale as f32;
        }
    }
    norm
}

/// Reduce-on-plateau in "min" mode with a relative improvement threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, threshold: 1e-4, min_lr: 0.0, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feeds one epoch's validation loss; returns `true` if the LR dropped.
    pub fn step(&mut self, metric: f64) -> bool {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            let next = (self.lr * self.factor).max(self.min_lr);
            if self.lr - next > 1e-12 {
                self.lr = next;
                return true;
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Loss history as CSV `epoch,train_loss,val_loss,lr`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    s
}

/// Splits segments into training and validation sets by scene. The last
/// `ceil(fraction * scenes)` scenes (in order of first appearance) go to
/// validation.
pub fn split_by_scene(segments: &[PairedSegment], fraction: f64) -> (Vec<PairedSegment>, Vec<PairedSegment>) {
    let mut scenes: Vec<usize> = Vec::new();
    for s in segments {
        if !scenes.contains(&s.scene) {
            scenes.push(s.scene);
        }
    }
    let n_val = ((scenes.len() as f64 * fraction).ceil() as usize).min(scenes.len().saturating_sub(1));
    let val_scenes = &scenes[scenes.len() - n_val..];
    segments.iter().cloned().partition(|s| !val_scenes.contains(&s.scene))
}

/// Gradient work is split into chunks of this many samples whatever the
/// thread count, so results do not depend on the pool size.
const GRAD_CHUNK: usize = 16;

struct Batch {
    x_t: Vec<f32>,
    y: Vec<f32>,
    x0: Vec<f32>,
    t: Vec<usize>,
}

fn draw_batch(segments: &[&PairedSegment], sched: &NoiseSchedule, r: &mut rng::Rng) -> Result<Batch> {
    let mut b = Batch { x_t: Vec::new(), y: Vec::new(), x0: Vec::new(), t: Vec::new() };
    for s in segments {
        let x = s.x.as_deref().ok_or_else(|| TrainError::Data("training segment without ground truth".into()))?;
        let pair = diffusion::training_pair(x, &s.y, sched, r)?;
        b.x_t.extend(pair.x_t.iter().map(|&v| v as f32));
        b.y.extend(s.y.iter().map(|&v| v as f32));
        b.x0.extend(x.iter().map(|&v| v as f32));
        b.t.push(pair.t);
    }
    Ok(b)
}

fn chunks(b: &Batch) -> Vec<(usize, usize)> {
    (0..b.t.len()).step_by(GRAD_CHUNK).map(|i| (i, (i + GRAD_CHUNK).min(b.t.len()))).collect()
}

fn batch_loss_and_grad(model: &RdtModel<f32>, b: &Batch, l: usize) -> Result<(f64, Vec<f32>)> {
    let total = b.t.len() as f32;
    let parts = chunks(b)
        .into_par_iter()
        .map(|(lo, hi)| {
            let (loss, mut g) =
                model.loss_and_grad(&b.x_t[lo * l..hi * l], &b.y[lo * l..hi * l], &b.t[lo..hi], &b.x0[lo * l..hi * l])?;
            let w = (hi - lo) as f32 / total;
            g.iter_mut().for_each(|v| *v *= w);
            Ok((f64::from(loss) * f64::from(w), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

fn batch_loss(model: &RdtModel<f32>, b: &Batch, l: usize) -> Result<f64> {
    let parts = chunks(b)
        .into_par_iter()
        .map(|(lo, hi)| {
            let loss = model.loss(&b.x_t[lo * l..hi * l], &b.y[lo * l..hi * l], &b.t[lo..hi], &b.x0[lo * l..hi * l])?;
            Ok(f64::from(loss) * (hi - lo) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum::<f64>() / b.t.len() as f64)
}

/// Mutable training state. One [`Trainer::epoch`] call runs one epoch.
pub struct Trainer {
    pub model: RdtModel<f32>,
    pub best: Option<(f64, RdtModel<f32>)>,
    pub history: Vec<EpochRecord>,
    pub scheduler: PlateauScheduler,
    /// Epochs completed so far.
    pub epoch: usize,
    cfg: TrainConfig,
    seed: u64,
    sched: NoiseSchedule,
    opt: AdamW,
    val_batches: Vec<Batch>,
    train: Vec<PairedSegment>,
}

impl Trainer {
    /// `seed` is used unless `cfg.seed` overrides it.
    pub fn new(
        model: RdtModel<f32>,
        diffusion: &DiffusionConfig,
        cfg: TrainConfig,
        seed: u64,
        train: Vec<PairedSegment>,
        val: &[PairedSegment],
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::Data("empty training set".into()));
        }
        let l = model.config().seq_len;
        if let Some(s) = train.iter().chain(val).find(|s| s.len() != l || s.x.as_ref().is_some_and(|x| x.len() != l)) {
            return Err(TrainError::Data(format!(
                "segment of length {} from scene {} does not match model length {l}",
                s.len(),
                s.scene
            )));
        }
        if let Some(s) = val.iter().find(|v| train.iter().any(|t| t.scene == v.scene)) {
            return Err(TrainError::Data(format!("scene {} appears in both training and validation sets", s.scene)));
        }
        let seed = cfg.seed.unwrap_or(seed);
        let sched = diffusion.schedule()?;
        // Validation draws are fixed once so epochs are compared on equal terms.
        let mut vr = rng::stream(seed, "train/val");
        let val_refs: Vec<&PairedSegment> = val.iter().collect();
        let val_batches =
            val_refs.chunks(cfg.batch_size).map(|c| draw_batch(c, &sched, &mut vr)).collect::<Result<Vec<_>>>()?;
        let opt = AdamW::new(model.param_count(), cfg.weight_decay);
        Ok(Self {
            model,
            best: None,
            history: Vec::new(),
            scheduler: PlateauScheduler::new(cfg.initial_lr, cfg.lr_reduce_factor, cfg.patience),
            epoch: 0,
            cfg,
            seed,
            sched,
            opt,
            val_batches,
            train,
        })
    }

    /// Continues numbering after `epoch` completed epochs at learning rate
    /// `lr`, with `best_val` as the best validation loss so far.
    pub fn resume_from(&mut self, epoch: usize, lr: f64, best_val: Option<f64>) {
        self.epoch = epoch;
        self.scheduler.lr = lr;
        if let Some(v) = best_val {
            self.scheduler.best = v;
            self.best = Some((v, self.model.clone()));
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// Mean validation loss on the fixed validation draws, or `None`
    /// without a validation set.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val_batches.is_empty() {
            return Ok(None);
        }
        let l = self.model.config().seq_len;
        let (mut total, mut count) = (0.0, 0usize);
        for b in &self.val_batches {
            total += batch_loss(&self.model, b, l)? * b.t.len() as f64;
            count += b.t.len();
        }
        Ok(Some(total / count as f64))
    }

    pub fn epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let l = self.model.config().seq_len;
        let mut r = rng::indexed_stream(self.seed, "train/epoch", epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut r);
        let (mut total, mut count) = (0.0, 0usize);
        let lr = self.scheduler.lr;
        for idx in order.chunks(self.cfg.batch_size) {
            let segs: Vec<&PairedSegment> = idx.iter().map(|&i| &self.train[i]).collect();
            let batch = draw_batch(&segs, &self.sched, &mut r)?;
            let (loss, mut grad) = batch_loss_and_grad(&self.model, &batch, l)?;
            let step = self.opt.steps() + 1;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, what: format!("loss is {loss}") });
            }
            let norm = clip_grad_norm(&mut grad, self.cfg.grad_clip);
            if !norm.is_finite() {
                return Err(TrainError::Diverged { epoch, step, what: format!("gradient norm is {norm}") });
            }
            self.opt.step(self.model.params_mut(), &grad, lr);
            if !self.model.is_finite() {
                return Err(TrainError::Diverged { epoch, step, what: "non-finite parameters".into() });
            }
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let train_loss = total / count as f64;
        let val_loss = self.validation_loss()?;
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(TrainError::Diverged { epoch, step: self.opt.steps(), what: format!("validation loss is {monitored}") });
        }
        if self.best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            self.best = Some((monitored, self.model.clone()));
        }
        self.scheduler.step(monitored);
        self.epoch = epoch;
        let rec = EpochRecord { epoch, train_loss, val_loss: val_loss.unwrap_or(f64::NAN), lr };
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs the configured number of epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let rec = self.epoch()?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    /// Best-validation model, or the current one if no epoch has run.
    pub fn best_model(&self) -> &RdtModel<f32> {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best.as_ref().map(|(v, _)| *v)
    }
}

/// Trains a fresh model and returns the best-validation model and the
/// loss history.
pub fn train(
    model: RdtModel<f32>,
    diffusion: &DiffusionConfig,
    cfg: TrainConfig,
    seed: u64,
    segments: &[PairedSegment],
) -> Result<(RdtModel<f32>, Vec<EpochRecord>)> {
    let (train, val) = split_by_scene(segments, cfg.val_fraction);
    let mut trainer = Trainer::new(model, diffusion, cfg, seed, train, &val)?;
    trainer.run(|_, _| Ok(()))?;
    let best = trainer.best_model().clone();
    Ok((best, trainer.history))
}
