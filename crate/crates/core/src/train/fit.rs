//! The training loop: micro-batches with gradient accumulation, clipping,
//! AdamW, EMA, per-epoch validation and best-checkpoint retention.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::data::{augment, to_batch, AugmentConfig, SegmentationSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_value, LossConfig};
use crate::metrics::{dice_coef, iou};
use crate::model::{predict_mask, Checkpoint, CheckpointMeta, MedLiteNet, EMA_PREFIX};
use crate::nn::BN_MOMENTUM;
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::ema::EmaState;
use super::optim::{adamw_step, clip_grad_norm, cosine_lr, grad_norm, scale_grads, AdamWConfig, OptimizerState};

pub const ADAM_M_PREFIX: &str = "adam_m/";
pub const ADAM_V_PREFIX: &str = "adam_v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per micro-batch.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// Ramp the EMA decay up from 0.1 over the first updates.
    pub ema_warmup: bool,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 4,
            lr: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 0.5,
            ema_decay: 0.999,
            ema_warmup: true,
            accumulation: 2,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("train.epochs", self.epochs), ("train.batch_size", self.batch_size), ("train.accumulation", self.accumulation)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, v) in [("train.lr", self.lr), ("train.lr_min", self.lr_min), ("train.eps", self.eps), ("train.clip_norm", self.clip_norm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and positive"));
            }
        }
        if self.lr_min > self.lr {
            return Err(Error::config("train.lr_min", "must not exceed train.lr"));
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2), ("train.ema_decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        self.loss.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate of epoch `epoch` (0-based); the last epoch runs at `lr_min`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs.saturating_sub(1), self.lr, self.lr_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub micro_batches: usize,
    /// Mean loss over the step's micro-batches.
    pub loss: f64,
    /// Global gradient norm after averaging, before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Running train-mode metrics over the epoch's micro-batches.
    pub train: SplitMetrics,
    /// Eval-mode metrics with EMA weights.
    pub val: SplitMetrics,
    /// Eval-mode metrics with the raw weights.
    pub val_raw: SplitMetrics,
}

pub const CSV_HEADER: &str = "epoch,split,loss,dice,iou,lr";

/// Two rows (train, val) per epoch under [`CSV_HEADER`].
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in history {
        for (split, m) in [("train", r.train), ("val", r.val)] {
            out.push_str(&format!("{},{split},{:.6},{:.6},{:.6},{}\n", r.epoch, m.loss, m.dice, m.iou, r.lr));
        }
    }
    out
}

/// Per-sample hard Dice and IoU at threshold 0.5, summed over a batch.
fn batch_scores(prob: &Tensor<f32>, masks: &Tensor<f32>) -> Result<(f64, f64)> {
    let pred = predict_mask(prob, 0.5);
    let n = prob.shape()[0];
    let per = prob.numel() / n;
    let (mut d, mut j) = (0.0, 0.0);
    for i in 0..n {
        let (p, m) = (&pred.data()[i * per..(i + 1) * per], &masks.data()[i * per..(i + 1) * per]);
        d += dice_coef(p, m)?;
        j += iou(p, m)?;
    }
    Ok((d, j))
}

/// Eval-mode loss (averaged per batch, weighted by batch size) and mean
/// per-sample Dice and IoU.
pub fn evaluate(
    model: &MedLiteNet<f32>,
    store: &ParamStore<f32>,
    samples: &[SegmentationSample],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<SplitMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty set".into()));
    }
    let (mut l, mut d, mut j) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (images, masks) = to_batch(&refs)?;
        let prob = model.predict_with(store, &images)?;
        l += total_loss_value(&prob, &masks, loss)? * chunk.len() as f64;
        let (bd, bj) = batch_scores(&prob, &masks)?;
        d += bd;
        j += bj;
    }
    let n = samples.len() as f64;
    Ok(SplitMetrics {
        loss: l / n,
        dice: d / n,
        iou: j / n,
    })
}

#[derive(Clone, Debug)]
pub struct MicroOutput {
    pub loss: f64,
    pub prob: Tensor<f32>,
}

/// Optimizer, EMA and accumulation state around a model it owns.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MedLiteNet<f32>,
    pub cfg: TrainConfig,
    pub opt: OptimizerState<f32>,
    pub ema: EmaState<f32>,
    /// Completed optimizer steps.
    pub step: usize,
    pub lr: f64,
    pending: usize,
    pending_loss: f64,
    micro_steps: usize,
    /// Test hook: poison the inputs of this micro-step with NaN.
    pub inject_nan_at: Option<usize>,
}

impl Trainer {
    pub fn new(model: MedLiteNet<f32>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(&model.store);
        let ema = EmaState::new(&model.store, cfg.ema_decay, cfg.ema_warmup);
        Ok(Self {
            model,
            cfg: cfg.clone(),
            opt,
            ema,
            step: 0,
            lr: cfg.lr,
            pending: 0,
            pending_loss: 0.0,
            micro_steps: 0,
            inject_nan_at: None,
        })
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Train-mode forward and backward on one micro-batch; gradients add
    /// into the store and BatchNorm running statistics advance.
    pub fn micro_step(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<MicroOutput> {
        let mut g = Graph::new();
        let x = if self.inject_nan_at == Some(self.micro_steps) {
            g.constant(images.map(|_| f32::NAN))
        } else {
            g.constant(images.clone())
        };
        self.micro_steps += 1;
        let p = self.model.forward(&mut g, x, Mode::Train)?;
        let loss = total_loss(&mut g, p, masks, &self.cfg.loss)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, lr: self.lr });
        }
        g.backward(loss, Some(&mut self.model.store))?;
        let updates = g.take_stat_updates();
        self.model.store.apply_stat_updates(updates, BN_MOMENTUM as f32);
        self.pending += 1;
        self.pending_loss += value;
        Ok(MicroOutput {
            loss: value,
            prob: g.value(p).clone(),
        })
    }

    /// Averages the pending gradients, clips, applies AdamW and the EMA
    /// update, then zeroes the gradients. No-op without pending gradients.
    pub fn optimizer_step(&mut self, epoch: usize) -> Result<Option<StepRecord>> {
        if self.pending == 0 {
            return Ok(None);
        }
        let n = self.pending;
        scale_grads(&mut self.model.store, 1.0 / n as f64);
        let clip = clip_grad_norm(&mut self.model.store, self.cfg.clip_norm);
        let clipped_norm = grad_norm(&self.model.store);
        adamw_step(&mut self.model.store, &mut self.opt, self.lr, &self.cfg.adamw())?;
        self.ema.update(&self.model.store);
        self.model.store.zero_grad();
        let rec = StepRecord {
            step: self.step,
            epoch,
            lr: self.lr,
            micro_batches: n,
            loss: self.pending_loss / n as f64,
            grad_norm: clip.norm,
            clipped_norm,
        };
        self.step += 1;
        self.pending = 0;
        self.pending_loss = 0.0;
        Ok(Some(rec))
    }

    /// EMA shadow with the live BatchNorm statistics.
    pub fn ema_store(&self) -> ParamStore<f32> {
        self.ema.weights(&self.model.store)
    }

    /// Raw weights and buffers, the EMA shadow and the Adam moments.
    pub fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut ck = Checkpoint::new(meta);
        ck.push_store("", &self.model.store, false);
        ck.push_store(EMA_PREFIX, &self.ema.shadow, true);
        let (m, v) = self.opt.moment_stores(&self.model.store);
        ck.push_store(ADAM_M_PREFIX, &m, true);
        ck.push_store(ADAM_V_PREFIX, &v, true);
        ck
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub trainer: Trainer,
}

impl FitOutcome {
    pub fn csv(&self) -> String {
        metrics_csv(&self.history)
    }
}

/// Options outside the recipe itself.
#[derive(Default)]
pub struct FitOptions<'a> {
    pub augment: Option<&'a AugmentConfig>,
    pub inject_nan_at: Option<usize>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Trains `model` on `train` and selects the epoch with the best EMA
/// validation Dice. Shuffling and augmentation draw from `cfg.seed` only.
pub fn fit(
    model: MedLiteNet<f32>,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    cfg: &TrainConfig,
    mut opts: FitOptions<'_>,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    if let Some(a) = opts.augment {
        a.validate()?;
    }
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.inject_nan_at = opts.inject_nan_at;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let meta = |trainer: &Trainer, epoch: usize, dice: Option<f64>| CheckpointMeta {
        model: trainer.model.config.clone(),
        best_val_dice: dice,
        epoch: Some(epoch),
        step: Some(trainer.step),
        seed: Some(cfg.seed),
    };

    for epoch in 0..cfg.epochs {
        trainer.lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let aug_seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();

        let (mut loss_sum, mut dice_sum, mut iou_sum) = (0.0, 0.0, 0.0);
        let n_micro = order.len().div_ceil(cfg.batch_size);
        for (k, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<SegmentationSample> = idx
                .iter()
                .zip(&aug_seeds[k * cfg.batch_size..])
                .map(|(&i, &s)| match opts.augment {
                    Some(a) => augment(&train[i], a, s),
                    None => train[i].clone(),
                })
                .collect();
            let refs: Vec<&SegmentationSample> = samples.iter().collect();
            let (images, masks) = to_batch(&refs)?;
            let out = trainer.micro_step(&images, &masks)?;
            loss_sum += out.loss * idx.len() as f64;
            let (d, j) = batch_scores(&out.prob, &masks)?;
            dice_sum += d;
            iou_sum += j;
            if trainer.pending() == cfg.accumulation || k + 1 == n_micro {
                steps.extend(trainer.optimizer_step(epoch)?);
            }
        }
        let n = train.len() as f64;
        let train_m = SplitMetrics {
            loss: loss_sum / n,
            dice: dice_sum / n,
            iou: iou_sum / n,
        };
        let ema_store = trainer.ema_store();
        let val_m = evaluate(&trainer.model, &ema_store, val, cfg.batch_size, &cfg.loss)?;
        let val_raw = evaluate(&trainer.model, &trainer.model.store, val, cfg.batch_size, &cfg.loss)?;
        let rec = EpochRecord {
            epoch,
            lr: trainer.lr,
            train: train_m,
            val: val_m,
            val_raw,
        };
        if best.as_ref().is_none_or(|(d, _)| val_m.dice > *d) {
            best = Some((val_m.dice, trainer.checkpoint(meta(&trainer, epoch, Some(val_m.dice)))));
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&rec);
        }
        history.push(rec);
    }

    let best_dice = best.as_ref().map(|(d, _)| *d);
    let last = trainer.checkpoint(meta(&trainer, cfg.epochs - 1, best_dice));
    Ok(FitOutcome {
        history,
        steps,
        best: best.expect("at least one epoch").1,
        last,
        trainer,
    })
}
