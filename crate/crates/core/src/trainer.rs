//! Optimization: Adadelta, gradient clipping, the WER-plateau learning-rate
//! schedule, and the epoch loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{checkpoint_of, Progress};
use crate::config::TrainConfig;
use crate::data::batch::make_batches;
use crate::data::dataset::Sample;
use crate::data::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{exprate_at_k, wer};
use crate::model::{Model, ObjectiveSettings};
use crate::objective::LossBreakdown;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adadelta accumulators, one pair of tensors per parameter:
///
/// ```text
/// E[g²] ← ρ E[g²] + (1 − ρ) g²
/// Δ     = −sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε) · g
/// E[Δ²] ← ρ E[Δ²] + (1 − ρ) Δ²
/// θ     ← θ + lr · Δ
/// ```
#[derive(Clone, Debug)]
pub struct Adadelta<T> {
    pub rho: T,
    pub eps: T,
    sq_grad: Vec<Tensor<T>>,
    sq_update: Vec<Tensor<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(store: &ParamStore<T>, rho: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adadelta {
            rho: T::of(rho),
            eps: T::of(eps),
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    /// Running averages `E[g²]` and `E[Δ²]`, one tensor per parameter.
    pub fn accumulators(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.sq_grad, &self.sq_update)
    }

    /// Applies one update to every trainable parameter. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, name, t) in store.iter() {
            let g = &grads[id.index()];
            if g.shape() != t.shape() {
                return Err(Error::dim("adadelta", t.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        let (rho, eps, lr) = (self.rho, self.eps, T::of(lr));
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let i = id.index();
            let g = grads[i].data();
            let eg = self.sq_grad[i].data_mut();
            let ed = self.sq_update[i].data_mut();
            let p = store.tensor_mut(id).data_mut();
            for j in 0..p.len() {
                eg[j] = rho * eg[j] + (T::one() - rho) * g[j] * g[j];
                let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g[j];
                ed[j] = rho * ed[j] + (T::one() - rho) * delta * delta;
                p[j] += lr * delta;
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `threshold` (0 turns
/// clipping off). Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], threshold: f64) -> f64 {
    let norm = grads.iter().map(|g| g.squared_norm().as_f64()).sum::<f64>().sqrt();
    if threshold > 0.0 && norm > threshold {
        let f = T::of(threshold / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

/// Halves the learning rate after `patience` epochs without a strict
/// improvement of the best validation WER.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub patience: usize,
    pub max_drops: usize,
    pub best: Option<f64>,
    pub epochs_since_best: usize,
    pub drops: usize,
}

/// Outcome of one schedule update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleStep {
    pub lr: f64,
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, max_drops: usize) -> Self {
        PlateauSchedule {
            lr,
            patience,
            max_drops,
            best: None,
            epochs_since_best: 0,
            drops: 0,
        }
    }

    pub fn update(&mut self, val_wer: f64) -> ScheduleStep {
        let improved = self.best.is_none_or(|b| val_wer < b);
        let mut halved = false;
        if improved {
            self.best = Some(val_wer);
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
            if self.epochs_since_best >= self.patience {
                self.lr /= 2.0;
                self.drops += 1;
                self.epochs_since_best = 0;
                halved = true;
            }
        }
        ScheduleStep {
            lr: self.lr,
            improved,
            halved,
            stop: self.drops >= self.max_drops,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub ce_l2r: f64,
    pub ce_r2l: f64,
    pub kl: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "epoch,step,ce_l2r,ce_r2l,kl,total";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.ce_l2r, self.ce_r2l, self.kl, self.total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub mean_loss: f64,
    pub val_wer: f64,
    pub val_exprate: f64,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EpochLimit,
    LearningRateDrops,
    TargetReached,
}

pub struct FitResult<T> {
    /// Parameters after the last epoch.
    pub last: Model<T>,
    /// Parameters with the lowest validation WER.
    pub best: Model<T>,
    pub best_wer: f64,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
    pub stop: StopReason,
}

/// Where `fit` writes as it goes.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Best-WER checkpoint, rewritten at each improvement.
    pub checkpoint: Option<PathBuf>,
    /// CSV training log with one row per optimizer step.
    pub log: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochSummary)>,
}

/// Decodes every sample with the named branch (the inference branch when
/// `None`), in parallel.
pub fn predict_all<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    branch: Option<&str>,
    beam: Option<usize>,
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>> {
    samples
        .par_iter()
        .map(|s| model.recognize(&s.image, branch, beam, max_len).map(|d| d.tokens))
        .collect()
}

/// Averaged loss and gradients of one batch. Samples are processed in
/// parallel and reduced in a fixed order, so the result is deterministic.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    samples: &[&Sample],
    objective: &ObjectiveSettings,
) -> Result<(LossBreakdown<T>, Vec<Tensor<T>>)> {
    let per: Vec<_> = samples
        .par_iter()
        .map(|s| model.sample_gradients(&s.image, None, &s.target, objective))
        .collect::<Result<_>>()?;
    let breakdowns: Vec<_> = per.iter().map(|p| p.breakdown).collect();
    let mean = LossBreakdown::mean(&breakdowns).ok_or_else(|| Error::Input("empty batch".into()))?;
    let mut iter = per.into_iter();
    let mut total = iter.next().expect("nonempty").grads;
    for p in iter {
        for (acc, g) in total.iter_mut().zip(&p.grads) {
            acc.add_scaled(g, T::one())?;
        }
    }
    let inv = T::one() / T::of(samples.len() as f64);
    for g in &mut total {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((mean, total))
}

/// Opens the CSV log. Every effective setting precedes the header as a
/// `# key=value` comment line.
fn open_log(path: &Path, config: &TrainConfig) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (k, v) in config.pairs() {
        writeln!(w, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    Ok(w)
}

/// Trains a fresh model. Validation WER (greedy decoding with the inference
/// branch) drives the schedule; an empty `val` set validates on `train`.
pub fn fit<T: Scalar>(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train: &[Sample],
    val: &[Sample],
    mut options: FitOptions<'_>,
) -> Result<FitResult<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for s in train.iter().chain(val) {
        if let Some(&bad) = s.target.iter().find(|&&t| t as usize >= vocab.len()) {
            return Err(Error::Vocabulary(format!("sample {} uses token id {bad} outside the vocabulary", s.id)));
        }
    }
    let val = if val.is_empty() { train } else { val };
    let mut model = Model::<T>::new(config.model(vocab.len()), config.seed)?;
    if config.freeze_encoder {
        for id in model.encoder_ids() {
            model.store.set_trainable(id, false);
        }
    }
    let objective = ObjectiveSettings {
        lambda: config.lambda,
        temperature: config.temperature,
        detach_target: config.detach_target,
    };
    let mut opt = Adadelta::new(&model.store, config.rho, config.eps);
    let mut schedule = PlateauSchedule::new(config.lr, config.patience, config.max_drops);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546);
    let mut log_writer = options.log.as_deref().map(|p| open_log(p, config)).transpose()?;
    let mut result = FitResult {
        last: model.clone(),
        best: model.clone(),
        best_wer: f64::INFINITY,
        best_epoch: 0,
        log: Vec::new(),
        epochs: Vec::new(),
        stop: StopReason::EpochLimit,
    };
    let val_refs: Vec<Vec<TokenId>> = val.iter().map(|s| s.target.clone()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = schedule.lr;
        let mut order: Vec<Sample> = train.to_vec();
        order.shuffle(&mut shuffle_rng);
        let batches = make_batches(&order, config.batch_size, config.sort_by_length)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let members: Vec<&Sample> = batch
                .ids
                .iter()
                .map(|id| order.iter().find(|s| &s.id == id).expect("batch member"))
                .collect();
            let (b, mut grads) = batch_gradients(&model, &members, &objective)?;
            if !b.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {}", step + 1)));
            }
            clip_global_norm(&mut grads, config.clip);
            opt.step(&mut model.store, &grads, lr)?;
            step += 1;
            let row = LogRow {
                epoch,
                step,
                ce_l2r: b.ce_l2r.as_f64(),
                ce_r2l: b.ce_r2l.as_f64(),
                kl: b.kl.as_f64(),
                total: b.total.as_f64(),
            };
            if let (Some(w), Some(p)) = (log_writer.as_mut(), options.log.as_deref()) {
                writeln!(w, "{}", row.csv()).map_err(|e| Error::io(p, e))?;
            }
            loss_sum += row.total;
            result.log.push(row);
        }
        if let (Some(w), Some(p)) = (log_writer.as_mut(), options.log.as_deref()) {
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        let preds = predict_all(&model, val, None, None, config.max_decode_len)?;
        let val_wer = wer(&preds, &val_refs)?;
        let val_exprate = exprate_at_k(&preds, &val_refs, 0)?;
        let s = schedule.update(val_wer);
        if s.improved {
            result.best = model.clone();
            result.best_wer = val_wer;
            result.best_epoch = epoch;
            if let Some(path) = options.checkpoint.as_deref() {
                let progress = Progress {
                    epoch,
                    best_wer: val_wer,
                };
                checkpoint_of(&model, config, vocab, progress, false).save(path)?;
            }
        }
        let summary = EpochSummary {
            epoch,
            lr,
            mean_loss: loss_sum / batches.len() as f64,
            val_wer,
            val_exprate,
            improved: s.improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&summary);
        }
        result.epochs.push(summary);
        if config.stop_exprate.is_some_and(|t| val_exprate >= t) {
            result.stop = StopReason::TargetReached;
            break;
        }
        if s.stop {
            result.stop = StopReason::LearningRateDrops;
            break;
        }
    }
    result.last = model;
    Ok(result)
}
