//! Weighted multi-step loss, its exact gradient, and Adagrad training.

use std::time::Instant;

use rand::seq::SliceRandom;

use super::forward::{apply, apply_backward, ApplyCache, BatchStats, Mode};
use super::{NetworkParameters, BN_MOMENTUM, L2_OUTPUT};
use crate::error::{check_finite, check_len, Error, Result};
use crate::rng::{self, Stream};

/// A time-ordered sequence of states with per-entry loss weights.
///
/// Sample `j` uses state `j` as input and states `j+1 ..= j+n_f` as targets,
/// each residual weighted by the weights stored at the target time.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub m: usize,
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TrainingSet {
    pub fn new(m: usize, states: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if m == 0 || states.len() % m != 0 {
            return Err(Error::Dimension {
                context: "training states",
                expected: m,
                actual: states.len(),
            });
        }
        check_len("training weights", states.len(), weights.len())?;
        check_finite("training states", &states)?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { m, states, weights })
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of input/target tuples for an `n_f`-step loss.
    pub fn samples(&self, n_f: usize) -> usize {
        self.len().saturating_sub(n_f)
    }

    pub fn batch(&self, starts: &[usize], n_f: usize) -> TrainingBatch {
        let m = self.m;
        let row = |k: usize, v: &[f64]| v[k * m..(k + 1) * m].to_vec();
        let inputs = starts.iter().flat_map(|&j| row(j, &self.states)).collect();
        let targets = (1..=n_f)
            .map(|i| starts.iter().flat_map(|&j| row(j + i, &self.states)).collect())
            .collect();
        let weights = (1..=n_f)
            .map(|i| starts.iter().flat_map(|&j| row(j + i, &self.weights)).collect())
            .collect();
        TrainingBatch {
            m,
            inputs,
            targets,
            weights,
        }
    }
}

/// Inputs `(B x m)` plus one target and one weight block `(B x m)` per lead.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub m: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl TrainingBatch {
    pub fn n_f(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.inputs.is_empty() || self.inputs.len() % self.m != 0 {
            return Err(Error::Dimension {
                context: "batch inputs",
                expected: self.m,
                actual: self.inputs.len(),
            });
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidParameter("N_f must be at least 1".into()));
        }
        check_len("batch weight leads", self.targets.len(), self.weights.len())?;
        for (t, w) in self.targets.iter().zip(&self.weights) {
            check_len("batch targets", self.inputs.len(), t.len())?;
            check_len("batch weights", self.inputs.len(), w.len())?;
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidParameter(
                    "loss weights must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }
}

fn l2_term(params: &NetworkParameters) -> f64 {
    L2_OUTPUT * params.output_kernel().iter().map(|w| w * w).sum::<f64>()
}

fn weighted_sq(y: &[f64], t: &[f64], w: &[f64]) -> f64 {
    y.iter()
        .zip(t)
        .zip(w)
        .map(|((a, b), c)| c * (a - b).powi(2))
        .sum()
}

/// Sum over samples and leads of weighted squared errors, plus the L2 term.
pub fn loss(params: &NetworkParameters, batch: &TrainingBatch, mode: Mode) -> Result<f64> {
    batch.validate()?;
    let mut x = batch.inputs.clone();
    let mut total = 0.0;
    for (t, w) in batch.targets.iter().zip(&batch.weights) {
        x = apply(params, &x, batch.m, mode)?.0;
        total += weighted_sq(&x, t, w);
    }
    Ok(total + l2_term(params))
}

/// Loss and gradient plus the batch statistics of every application.
pub(crate) fn loss_and_gradient(
    params: &NetworkParameters,
    batch: &TrainingBatch,
    mode: Mode,
) -> Result<(f64, Vec<f64>, Vec<BatchStats>)> {
    batch.validate()?;
    let n_f = batch.n_f();
    let mut outputs = Vec::with_capacity(n_f);
    let mut caches: Vec<ApplyCache> = Vec::with_capacity(n_f);
    let mut stats = Vec::with_capacity(n_f);
    let mut x = batch.inputs.clone();
    let mut total = 0.0;
    for (t, w) in batch.targets.iter().zip(&batch.weights) {
        let (y, cache, s) = apply(params, &x, batch.m, mode)?;
        total += weighted_sq(&y, t, w);
        caches.push(cache);
        stats.push(s);
        outputs.push(y.clone());
        x = y;
    }

    let l = params.layout();
    let mut grad = vec![0.0; l.len];
    let mut g = vec![0.0; batch.inputs.len()];
    for i in (0..n_f).rev() {
        let (y, t, w) = (&outputs[i], &batch.targets[i], &batch.weights[i]);
        for (((gi, yi), ti), wi) in g.iter_mut().zip(y).zip(t).zip(w) {
            *gi += 2.0 * wi * (yi - ti);
        }
        g = apply_backward(params, &caches[i], &g, &mut grad);
    }
    for (gw, w) in grad[l.w4..l.b4].iter_mut().zip(params.output_kernel()) {
        *gw += 2.0 * L2_OUTPUT * w;
    }
    Ok((total + l2_term(params), grad, stats))
}

/// Train-mode loss and its gradient with respect to every trainable value.
pub fn backward(params: &NetworkParameters, batch: &TrainingBatch) -> Result<(f64, Vec<f64>)> {
    loss_and_gradient(params, batch, Mode::Train).map(|(l, g, _)| (l, g))
}

/// Adagrad accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub eps: f64,
    pub accumulator: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            accumulator: vec![0.0; len],
        }
    }
}

pub fn adagrad_step(weights: &mut [f64], grad: &[f64], opt: &mut OptimizerState) -> Result<()> {
    check_len("adagrad gradient", weights.len(), grad.len())?;
    check_len("adagrad accumulator", weights.len(), opt.accumulator.len())?;
    for ((w, g), a) in weights.iter_mut().zip(grad).zip(opt.accumulator.iter_mut()) {
        *a += g * g;
        *w -= opt.lr * g / (a.sqrt() + opt.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub n_f: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eps: f64,
    /// Trailing fraction of samples kept out of training and scored each epoch.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            n_f: 1,
            batch_size: 256,
            lr: 0.01,
            eps: 1e-7,
            holdout: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training loss per sample, averaged over the epoch's batches.
    pub train_loss: f64,
    /// Infer-mode loss per sample on the held-out split.
    pub holdout_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Entry 0 is the state before training (no train loss).
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

fn holdout_loss(
    params: &NetworkParameters,
    set: &TrainingSet,
    starts: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    if starts.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for chunk in starts.chunks(cfg.batch_size) {
        total += loss(params, &set.batch(chunk, cfg.n_f), Mode::Infer)? - l2_term(params);
    }
    Ok(Some(total / starts.len() as f64))
}

/// Shuffled mini-batch Adagrad with a fresh optimizer state.
pub fn train(
    params: &mut NetworkParameters,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.n_f == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "N_f and batch size must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::InvalidParameter(format!(
            "holdout fraction {} outside [0, 1)",
            cfg.holdout
        )));
    }
    let samples = set.samples(cfg.n_f);
    if samples == 0 {
        return Err(Error::InvalidParameter(format!(
            "{} states cannot supply an {}-step target",
            set.len(),
            cfg.n_f
        )));
    }
    if set.weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidParameter("all loss weights are zero".into()));
    }
    let n_hold = (samples as f64 * cfg.holdout).round() as usize;
    let n_train = samples - n_hold;
    let held: Vec<usize> = (n_train..samples).collect();
    let mut order: Vec<usize> = (0..n_train).collect();

    let mut report = TrainReport::default();
    let start = Instant::now();
    report.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        holdout_loss: holdout_loss(params, set, &held, cfg)?,
        seconds: 0.0,
    });
    if cfg.epochs == 0 || n_train == 0 {
        return Ok(report);
    }
    let mut opt = OptimizerState::new(params.weights.len(), cfg.lr, cfg.eps);
    let mut rng = rng::stream(cfg.seed, Stream::BatchShuffle);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = set.batch(chunk, cfg.n_f);
            let (l, grad, stats) = loss_and_gradient(params, &batch, Mode::Train)?;
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    loss: l,
                });
            }
            adagrad_step(&mut params.weights, &grad, &mut opt)?;
            for s in stats {
                params.running_mean = BN_MOMENTUM * params.running_mean + (1.0 - BN_MOMENTUM) * s.mean;
                params.running_var = BN_MOMENTUM * params.running_var + (1.0 - BN_MOMENTUM) * s.var;
            }
            epoch_loss += l - l2_term(params);
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / n_train as f64,
            holdout_loss: holdout_loss(params, set, &held, cfg)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} holdout {:?}",
            record.train_loss,
            record.holdout_loss
        );
        report.epochs.push(record);
    }
    Ok(report)
}
