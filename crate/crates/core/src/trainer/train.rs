use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{bn_ema_update, BceDiceLoss};
use super::metrics::dice;
use crate::error::{Error, Result};
use crate::kernel::{adam_step, AdamConfig, AdamState, GradScope, Tensor};
use crate::network::{Network, ProbMap, StatMode};
use crate::synthdata::Sample;

/// Validation images per forward call; tracked statistics make the
/// predictions independent of how images are grouped.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub bn_momentum: f32,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    /// Shuffling seed.
    pub seed: u64,
    /// Seed of the train/validation split; `seed` when absent.
    pub split_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 10,
            lr: 1e-4,
            bn_momentum: 0.1,
            early_stop_patience: 20,
            val_fraction: 0.2,
            seed: 0,
            split_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Train/validation index split, deterministic in `seed`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

fn stack(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Shape("samples in a batch differ in size".into()));
    }
    let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::new(vec![samples.len(), 1, h, w], data)
}

/// Predictions with tracked statistics for every sample.
pub fn predict_tracked(net: &Network, samples: &[&Sample]) -> Result<Vec<ProbMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let probs = net.forward_batch(&stack(chunk)?, StatMode::TRACKED)?;
        for i in 0..chunk.len() {
            out.push(ProbMap::from_batch(&probs, i)?);
        }
    }
    Ok(out)
}

/// Mean Dice at threshold 0.5 with tracked statistics.
pub fn evaluate_dice(net: &Network, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let preds = predict_tracked(net, samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += dice(&p.threshold(0.5), &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// One optimizer step on a batch; returns the batch loss.
fn train_step(
    net: &mut Network,
    batch: &[&Sample],
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    momentum: f32,
) -> Result<f64> {
    let x = stack(batch)?;
    let loss = BceDiceLoss::from_masks(batch.iter().map(|s| s.mask.as_slice()));
    let (value, grads, batch_stats) = {
        let mut rec = net.forward_recorded(&x, StatMode::INSTANT, None, GradScope::All)?;
        let l = rec.tape.scalar(rec.probs, Box::new(loss))?;
        let value = rec
            .tape
            .scalar_value(l)
            .ok_or_else(|| Error::Contract("loss node has no value".into()))?;
        let grads = rec.tape.backward(l)?;
        (value, grads, rec.batch_stats)
    };
    let mut params = net.parameters_mut();
    let grad_refs: Vec<Option<&[f32]>> = params.iter().map(|(id, _)| grads.get(*id)).collect();
    let mut slices: Vec<&mut [f32]> = params.iter_mut().map(|(_, p)| &mut **p).collect();
    adam_step(&mut slices, &grad_refs, adam, adam_cfg)?;
    for (layer, stats) in net.bn_layers_mut().iter_mut().zip(batch_stats) {
        let stats = stats.ok_or_else(|| Error::Contract("training forward lacks batch statistics".into()))?;
        layer.tracked = bn_ema_update(&layer.tracked, &stats, momentum)?;
    }
    Ok(value)
}

/// Adam on the BCE + Dice loss with batch statistics, tracked statistics
/// updated by EMA. Returns the weights with the best validation Dice.
pub fn train(net: &Network, samples: &[Sample], cfg: &TrainConfig) -> Result<(Network, History)> {
    train_with_progress(net, samples, cfg, |_| {})
}

pub fn train_with_progress(
    net: &Network,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(Network, History)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (train_idx, val_idx) =
        split_indices(samples.len(), cfg.val_fraction, cfg.split_seed.unwrap_or(cfg.seed))?;
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();

    let mut work = net.clone();
    let sizes: Vec<usize> = work.parameters_mut().iter().map(|(_, p)| p.len()).collect();
    let mut adam = AdamState::new(sizes);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History {
        best_val_dice: f64::NEG_INFINITY,
        ..History::default()
    };
    let mut best = work.clone();
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            loss_sum += train_step(&mut work, &batch, &mut adam, &adam_cfg, cfg.bn_momentum)?;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_dice: evaluate_dice(&work, &val)?,
        };
        progress(&record);
        history.epochs.push(record);
        if record.val_dice > history.best_val_dice {
            history.best_val_dice = record.val_dice;
            history.best_epoch = epoch;
            best = work.clone();
        } else if epoch - history.best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    Ok((best, history))
}

/// Appends one human-readable line per epoch.
pub fn log_epoch(out: &mut impl Write, r: &EpochRecord) {
    let _ = writeln!(out, "epoch {:3}  loss {:.4}  val dice {:.4}", r.epoch, r.train_loss, r.val_dice);
}
