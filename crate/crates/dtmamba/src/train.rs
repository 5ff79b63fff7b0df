//! Mini-batch training loop and split evaluation.
//!
//! Each step builds a fresh tape, binds the master weights, runs the
//! forward pass with dropout, and applies one Adam update. Validation MSE
//! drives both best-checkpoint tracking and learning-rate halving on
//! plateau. Any numeric failure (overflow in the forward pass, non-finite
//! gradient) rolls the model back to the best parameters seen so far and
//! surfaces the error instead of continuing from garbage.

use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_window_starts, SeriesData, Splits};
use crate::error::DtError;
use crate::init::seeded_rng;
use crate::metrics::{MetricsAccum, MetricsReport};
use crate::model::DtMamba;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor};
use crate::Result;

/// Scale the squared error is averaged on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossScale {
    /// Plain MSE on the original units.
    #[default]
    Raw,
    /// Each error divided by its window's per-channel standard deviation
    /// before squaring, so wide and narrow channels contribute evenly.
    Normalized,
}

impl FromStr for LossScale {
    type Err = DtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(LossScale::Raw),
            "normalized" => Ok(LossScale::Normalized),
            other => Err(DtError::Config(format!(
                "unknown loss scale {other:?}; expected raw or normalized"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Consecutive non-improving validation epochs before the learning
    /// rate is halved.
    pub patience: usize,
    pub seed: u64,
    pub loss_scale: LossScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            patience: 2,
            seed: 0,
            loss_scale: LossScale::Raw,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Window-weighted mean training loss, on the configured loss scale.
    pub train_loss: f64,
    /// Raw-scale validation error; None when the validation split has no
    /// complete window.
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

/// Halve-on-plateau tracker: `observe` returns true when `patience`
/// consecutive epochs failed to improve the best value.
#[derive(Debug)]
struct Plateau {
    best: f64,
    bad: usize,
    patience: usize,
}

impl Plateau {
    fn new(patience: usize) -> Self {
        Plateau { best: f64::INFINITY, bad: 0, patience }
    }

    /// Returns (improved, halve_now).
    fn observe(&mut self, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.bad = 0;
            return (true, false);
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            (false, true)
        } else {
            (false, false)
        }
    }
}

fn snapshot(model: &DtMamba) -> Vec<Tensor> {
    model.named_params().into_iter().map(|(_, t)| t.clone()).collect()
}

fn restore(model: &mut DtMamba, snap: &[Tensor]) {
    for (p, s) in model.params_mut().into_iter().zip(snap) {
        p.data_mut().copy_from_slice(s.data());
    }
}

/// Squared-error loss between the raw-scale prediction and the target,
/// optionally rescaled per element before squaring.
fn batch_loss(
    tape: &mut Tape,
    pred: crate::tensor::TensorId,
    y: &Tensor,
    weights: Option<Vec<f64>>,
) -> Result<crate::tensor::TensorId> {
    let y_id = tape.constant(y.clone())?;
    let mut diff = tape.sub(pred, y_id)?;
    if let Some(w) = weights {
        let w_id = tape.constant(Tensor::from_vec(y.shape().to_vec(), w)?)?;
        diff = tape.mul(diff, w_id)?;
    }
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// 1/(std + eps) for every (window, step, channel) element, from the
/// (B, 1, N) window statistics.
fn inverse_std_weights(std: &Tensor, eps: f64, horizon: usize) -> Vec<f64> {
    let s = std.shape();
    let (b, n) = (s[0], s[2]);
    let mut w = Vec::with_capacity(b * horizon * n);
    for i in 0..b {
        for _ in 0..horizon {
            for c in 0..n {
                w.push(1.0 / (std.data()[i * n + c] + eps));
            }
        }
    }
    w
}

/// Trains `model` in place and returns the per-epoch log. On success the
/// model holds the parameters of the best validation epoch (or of the last
/// epoch when the validation split is empty).
pub fn train(
    model: &mut DtMamba,
    data: &SeriesData,
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if cfg.batch_size == 0 {
        return Err(DtError::Config("batch size must be at least 1".into()));
    }
    if cfg.epochs == 0 {
        return Err(DtError::Config("need at least one epoch".into()));
    }
    let (t, s) = (model.config.lookback, model.config.horizon);
    if data.channels != model.config.channels {
        return Err(DtError::Data(format!(
            "model expects {} channels, series has {}",
            model.config.channels, data.channels
        )));
    }
    let train_starts = split_window_starts(&splits.train, t, s);
    if train_starts.is_empty() {
        return Err(DtError::Data(format!(
            "training split of {} rows cannot hold one {}+{} window",
            splits.train.end - splits.train.start,
            t,
            s
        )));
    }
    let val_starts = split_window_starts(&splits.val, t, s);

    let sizes: Vec<usize> = model.named_params().iter().map(|(_, p)| p.numel()).collect();
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() },
        &sizes,
    )?;
    let mut rng = seeded_rng(cfg.seed);
    let mut best = snapshot(model);
    let mut plateau = Plateau::new(cfg.patience.max(1));
    let mut history: Vec<EpochStats> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = train_starts.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut window_sum = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let step = (|| -> Result<f64> {
                let (x, y) = data.batch(chunk, t, s)?;
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape)?;
                let art = model.forward(&mut tape, &bound, &x, Some(&mut rng))?;
                let weights = match cfg.loss_scale {
                    LossScale::Raw => None,
                    LossScale::Normalized => {
                        Some(inverse_std_weights(&art.stats.std, art.stats.eps, s))
                    }
                };
                let loss_id = batch_loss(&mut tape, art.prediction, &y, weights)?;
                let loss = tape.value(loss_id).data()[0];
                tape.backward(loss_id)?;
                let grad_bufs: Vec<Vec<f64>> = bound
                    .ids
                    .iter()
                    .zip(&sizes)
                    .map(|(&id, &len)| match tape.grad(id) {
                        Some(g) => g.to_vec(),
                        None => vec![0.0; len],
                    })
                    .collect();
                let grad_refs: Vec<&[f64]> = grad_bufs.iter().map(|g| g.as_slice()).collect();
                let mut params = model.params_mut();
                adam.step(&mut params, &grad_refs)?;
                Ok(loss)
            })();
            match step {
                Ok(loss) => {
                    loss_sum += loss * chunk.len() as f64;
                    window_sum += chunk.len();
                }
                Err(e @ DtError::Numeric(_)) => {
                    restore(model, &best);
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }

        let val = match evaluate(model, data, &splits.val, cfg.batch_size) {
            Ok(v) => v,
            Err(e @ DtError::Numeric(_)) => {
                restore(model, &best);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        debug_assert_eq!(val.is_some(), !val_starts.is_empty());

        if let Some(report) = &val {
            let (improved, halve) = plateau.observe(report.mse);
            if improved {
                best = snapshot(model);
            }
            if halve {
                adam.set_lr(adam.lr() / 2.0);
            }
        } else {
            // Nothing to select on: the latest parameters are the best
            // known, which also keeps divergence rollback one epoch deep.
            best = snapshot(model);
        }

        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / window_sum as f64,
            val_mse: val.as_ref().map(|r| r.mse),
            val_mae: val.as_ref().map(|r| r.mae),
            lr: adam.lr(),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.push(stats);
    }

    restore(model, &best);
    Ok(history)
}

/// Runs `predict` over every complete window in `range` and aggregates the
/// errors. None when the range holds no complete window.
pub fn evaluate_with(
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
    data: &SeriesData,
    range: &Range<usize>,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
) -> Result<Option<MetricsReport>> {
    if batch_size == 0 {
        return Err(DtError::Config("batch size must be at least 1".into()));
    }
    let starts = split_window_starts(range, lookback, horizon);
    if starts.is_empty() {
        return Ok(None);
    }
    let mut accum = MetricsAccum::new(horizon, data.channels);
    for chunk in starts.chunks(batch_size) {
        let (x, y) = data.batch(chunk, lookback, horizon)?;
        let pred = predict(&x)?;
        accum.add(&pred, &y)?;
    }
    Ok(accum.finish())
}

/// Deterministic (dropout-free) evaluation of the model over a split.
pub fn evaluate(
    model: &DtMamba,
    data: &SeriesData,
    range: &Range<usize>,
    batch_size: usize,
) -> Result<Option<MetricsReport>> {
    evaluate_with(
        |x| forecast(model, x),
        data,
        range,
        model.config.lookback,
        model.config.horizon,
        batch_size,
    )
}

/// One dropout-free forward pass: (B, T, N) in, (B, S, N) out, raw scale.
pub fn forecast(model: &DtMamba, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let art = model.forward(&mut tape, &bound, x, None)?;
    Ok(tape.value(art.prediction).clone())
}
