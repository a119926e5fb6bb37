use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::neg_si_sdr;
use super::schedule::{clip_global_norm, Adam, AdamConfig, Decision, Schedule};
use crate::autodiff::{Graph, Tensor};
use crate::data::{mix_seed, CorpusItem};
use crate::dsp::{si_sdr, Waveform};
use crate::error::{Error, Result};
use crate::model::Piave;

pub const FRESH_LR: f64 = 1e-3;
pub const FINE_TUNE_LR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub max_epochs: usize,
    pub patience_halve: usize,
    pub patience_stop: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Minimum validation gain in dB that counts as an improvement.
    pub improvement_db: f64,
    /// Use only the first `n` training items when set.
    pub train_limit: Option<usize>,
    /// Use only the first `n` validation items when set.
    pub val_limit: Option<usize>,
    /// Fit the output gain on the validation split after training.
    pub calibrate_gain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: FRESH_LR,
            max_epochs: 6,
            patience_halve: 3,
            patience_stop: 6,
            clip_norm: 5.0,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            improvement_db: 1e-4,
            train_limit: None,
            val_limit: None,
            calibrate_gain: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience_stop < self.patience_halve {
            return Err(Error::Config("patience_stop must be at least patience_halve".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.lr_init > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("lr_init, batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One epoch's outcome. Deterministic fields only; wall time is reported
/// through the progress callback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_si_sdr: f64,
    pub decision: Decision,
    /// Largest post-clip gradient norm over the epoch's steps.
    pub max_clipped_norm: f64,
    /// Largest pre-clip gradient norm.
    pub max_raw_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_si_sdr: f64,
    /// Gain folded into the decoder by calibration (1 when disabled).
    pub output_gain: f64,
}

fn item_grads(model: &Piave<f32>, item: &CorpusItem) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let streams = model
        .config()
        .prepare_streams(item.original.clone(), item.pose_invariant.clone())?;
    let out = model.forward(&mut g, &p, &item.mixture, &streams)?;
    let loss = neg_si_sdr(&mut g, out.estimate, &item.target)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss {value} on item {}", item.meta.id)));
    }
    g.backward(loss)?;
    let grads = p
        .iter()
        .map(|&v| g.grad(v).expect("parameters require grad"))
        .collect();
    Ok((value, grads))
}

/// Mean SI-SDR of the model's extractions over `items` (front view).
pub fn validation_si_sdr(model: &Piave<f32>, items: &[CorpusItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let rate = model.config().sample_rate;
    let scores = crate::parallel::pool().install(|| {
        items
            .par_iter()
            .map(|item| {
                let streams = model
                    .config()
                    .prepare_streams(item.original.clone(), item.pose_invariant.clone())?;
                let est = model.extract(&item.mixture, &streams)?;
                let v = si_sdr(&Waveform::from_f32(&est, rate)?, &Waveform::from_f32(&item.target, rate)?)?;
                Ok(v.value)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    if mean.is_nan() {
        return Err(Error::Diverged("validation SI-SDR is NaN".into()));
    }
    Ok(mean)
}

/// The SI-SDR loss leaves the output level free, which the scale-dependent
/// SDR metric is not. Fits the single gain `g` minimizing `Σ‖y − g·ŷ‖²`
/// over `items` and folds it into the decoder; returns `g`.
pub fn calibrate_output_gain(model: &mut Piave<f32>, items: &[CorpusItem]) -> Result<f64> {
    let parts = crate::parallel::pool().install(|| {
        items
            .par_iter()
            .map(|item| {
                let streams = model
                    .config()
                    .prepare_streams(item.original.clone(), item.pose_invariant.clone())?;
                let est = model.extract(&item.mixture, &streams)?;
                let cross: f64 = est.iter().zip(&item.target).map(|(&a, &b)| a as f64 * b as f64).sum();
                let energy: f64 = est.iter().map(|&a| a as f64 * a as f64).sum();
                Ok((cross, energy))
            })
            .collect::<Result<Vec<(f64, f64)>>>()
    })?;
    let (cross, energy) = parts.iter().fold((0.0, 0.0), |(c, e), (a, b)| (c + a, e + b));
    let gain = cross / energy;
    // A negative gain is legitimate: the loss cannot see the output's sign.
    if !(energy > 0.0) || !gain.is_finite() || gain == 0.0 {
        return Ok(1.0);
    }
    model.scale_output(gain as f32);
    Ok(gain)
}

/// Trains `model` on `train`, tracking `val`, and returns the parameters of
/// the best validation epoch. `progress` sees every epoch and its wall time.
pub fn train(
    mut model: Piave<f32>,
    train: &[CorpusItem],
    val: &[CorpusItem],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord, f64),
) -> Result<(Piave<f32>, TrainHistory)> {
    cfg.validate()?;
    let train = &train[..cfg.train_limit.unwrap_or(train.len()).min(train.len())];
    let val = &val[..cfg.val_limit.unwrap_or(val.len()).min(val.len())];
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    let mut opt = Adam::new(cfg.adam, model.params());
    let mut schedule = Schedule::new(cfg.lr_init, cfg.patience_halve, cfg.patience_stop, cfg.improvement_db);
    let mut best = model.params().clone();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_si_sdr: f64::NEG_INFINITY,
        output_gain: 1.0,
    };
    let pool = crate::parallel::pool();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = schedule.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut max_clipped, mut max_raw) = (0.0, 0.0f64, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            // Per-item gradients are reduced in batch order, so the result
            // does not depend on the worker count.
            let per_item = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| item_grads(&model, &train[i]))
                    .collect::<Result<Vec<_>>>()
            })?;
            let scale = 1.0 / batch.len() as f32;
            let mut grads: Vec<Tensor<f32>> = per_item[0].1.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (loss, g) in &per_item {
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b * scale;
                    }
                }
            }
            let raw = clip_global_norm(&mut grads, cfg.clip_norm);
            max_raw = max_raw.max(raw);
            max_clipped = max_clipped.max(super::schedule::global_norm(&grads));
            opt.step(model.params_mut(), &grads, lr);
        }
        let val_score = validation_si_sdr(&model, val)?;
        let decision = schedule.observe(val_score);
        if decision == Decision::Improved {
            best = model.params().clone();
            history.best_epoch = epoch;
            history.best_val_si_sdr = val_score;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_si_sdr: val_score,
            decision,
            max_clipped_norm: max_clipped,
            max_raw_norm: max_raw,
        };
        progress(&record, started.elapsed().as_secs_f64());
        history.epochs.push(record);
        if decision == Decision::Stop {
            break;
        }
    }
    model.params_mut().assign_from(&best)?;
    if cfg.calibrate_gain {
        history.output_gain = calibrate_output_gain(&mut model, val)?;
    }
    Ok((model, history))
}
