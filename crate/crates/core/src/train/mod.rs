//! Training recipe, cross-validation protocols and evaluation.

mod metrics;
mod optim;
mod runner;
mod schedule;
mod splits;
mod wilcoxon;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{argmax_rows, metrics_from_predictions, FoldMetrics, MetricsReport};
pub use optim::{adamw_step, adamw_update, AdamState, AdamWConfig};
pub use runner::{cross_validate, fold_jobs, run_folds, run_job, CvOutcome, FoldJob, FoldResult};
pub use schedule::{EarlyStopping, PlateauScheduler, StopDecision};
pub use splits::{make_splits, Fold, SplitParams, SplitPlan, SplitScheme};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult, EXACT_MAX_N};

use crate::autograd::{Tape, Var};
use crate::data::SegmentSet;
use crate::error::{Error, Result};
use crate::model::Mactn;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Rows per eval-mode forward when scoring a set.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_delta: f64,
    pub flooding_b: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Keep each step's logits and labels in the step records.
    pub record_step_logits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            plateau_patience: 10,
            plateau_factor: 0.1,
            min_delta: 1e-4,
            flooding_b: 1.3,
            early_stop_patience: 15,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: None,
            record_step_logits: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("batch_size", self.batch_size as f64),
            ("max_epochs", self.max_epochs as f64),
            ("plateau_patience", self.plateau_patience as f64),
            ("early_stop_patience", self.early_stop_patience as f64),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("min_delta", self.min_delta),
            ("flooding_b", self.flooding_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau_factor {} not in (0, 1)", self.plateau_factor)));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} {v} not in [0, 1)")));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mean cross-entropy wrapped as `|CE - b| + b`. Returns `(flooded, ce)`.
pub fn flooding_cross_entropy<'t>(logits: Var<'t>, labels: &[usize], b: f64) -> Result<(Var<'t>, Var<'t>)> {
    let ce = logits.cross_entropy(labels)?;
    let flooded = ce.shift(-b)?.abs()?.shift(b)?;
    Ok((flooded, ce))
}

/// Mean softmax cross-entropy of a `(B, classes)` logit array.
pub fn cross_entropy_of(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::dim(format!("logits {s:?} for {} labels", labels.len())));
    }
    let c = s[1];
    let mut total = 0.0;
    for (row, &lab) in logits.data().chunks(c).zip(labels) {
        if lab >= c {
            return Err(Error::InvalidLabel { label: lab, n_classes: c });
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[lab];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean flooded loss over the epoch's batches.
    pub train_loss: f64,
    pub train_ce: f64,
    /// Eval-mode cross-entropy on the validation segments.
    pub val_loss: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub flooded: f64,
    pub ce: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the best monitored epoch.
    pub model: Mactn,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Wall-clock seconds per epoch; kept apart so histories compare exactly.
    pub epoch_seconds: Vec<f64>,
    pub optimizer: AdamState,
    /// Every segment index read while training or validating.
    pub touched: BTreeSet<usize>,
}

fn check_indices(data: &SegmentSet, idx: &[usize], what: &str) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Contract(format!("{what} index {bad} outside {} segments", data.len())));
    }
    Ok(())
}

/// Eval-mode logits of the listed segments, `(len, classes)`.
pub fn predict_logits(model: &Mactn, data: &SegmentSet, idx: &[usize]) -> Result<Tensor> {
    let n_classes = model.config().n_classes;
    let mut out = Vec::with_capacity(idx.len() * n_classes);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = model.predict(&data.batch(chunk)?)?;
        out.extend_from_slice(logits.data());
    }
    Tensor::new(vec![idx.len(), n_classes], out)
}

/// Accuracy, macro F1 and confusion matrix of `model` on the listed segments.
pub fn evaluate(model: &Mactn, data: &SegmentSet, idx: &[usize]) -> Result<(FoldMetrics, Vec<usize>)> {
    check_indices(data, idx, "evaluation")?;
    if idx.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let n_classes = model.config().n_classes;
    let logits = predict_logits(model, data, idx)?;
    let pred = argmax_rows(logits.data(), n_classes);
    let m = metrics_from_predictions(&pred, &data.labels(idx), n_classes)?;
    Ok((m, pred))
}

/// Runs the full recipe from `model`'s current weights.
///
/// Each epoch shuffles `train_idx`, steps AdamW on the flooded loss per
/// batch, then monitors eval-mode validation cross-entropy (training
/// cross-entropy when `val_idx` is empty) for plateau decay and early
/// stopping. The returned model holds the best monitored epoch's weights.
pub fn train(model: &Mactn, data: &SegmentSet, train_idx: &[usize], val_idx: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    check_indices(data, train_idx, "training")?;
    check_indices(data, val_idx, "validation")?;
    let mc = model.config();
    let shape = data.segment_shape()?;
    if shape != [mc.n_channels, mc.input_len] {
        return Err(Error::dim(format!(
            "segments are {shape:?}, model expects [{}, {}]",
            mc.n_channels, mc.input_len
        )));
    }
    if data.n_classes != mc.n_classes {
        return Err(Error::Config(format!(
            "data has {} classes, model head has {}",
            data.n_classes, mc.n_classes
        )));
    }

    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut opt = AdamState::new(current.params());
    let mut adam = cfg.adamw();
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_idx.to_vec();
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut epoch_seconds = Vec::new();
    let touched: BTreeSet<usize> = train_idx.iter().chain(val_idx).copied().collect();

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_flooded, mut sum_ce, mut n_batches) = (0.0, 0.0, 0usize);
        let mut capped = false;
        for batch in order.chunks(cfg.batch_size) {
            let labels = data.labels(batch);
            let tape = Tape::new();
            let x = tape.constant(data.batch(batch)?);
            let fwd = current.forward_tape(&tape, x, Mode::Train, false, &mut rng)?;
            let (flooded, ce) = flooding_cross_entropy(fwd.logits, &labels, cfg.flooding_b)?;
            let (fl, cev) = (flooded.value().data()[0], ce.value().data()[0]);
            if !fl.is_finite() {
                return Err(Error::NonFinite { op: "training loss".into() });
            }
            let mut grads = tape.backward(flooded)?;
            let g: Vec<Vec<f64>> = fwd
                .params
                .iter()
                .map(|&p| grads.take(p).unwrap_or_else(|| vec![0.0; p.value().numel()]))
                .collect();
            let logits = cfg.record_step_logits.then(|| fwd.logits.value());
            let t = opt.step + 1;
            adamw_step(current.params_mut(), &g, &mut opt, t, &adam)?;
            current.apply_bn_updates(&fwd.bn_stats);
            steps.push(StepRecord {
                epoch,
                flooded: fl,
                ce: cev,
                labels: cfg.record_step_logits.then(|| labels.clone()),
                logits,
            });
            sum_flooded += fl;
            sum_ce += cev;
            n_batches += 1;
            if cfg.max_steps.is_some_and(|m| steps.len() >= m) {
                capped = true;
                break;
            }
        }
        let train_loss = sum_flooded / n_batches as f64;
        let train_ce = sum_ce / n_batches as f64;
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            let logits = predict_logits(&current, data, val_idx)?;
            Some(cross_entropy_of(&logits, &data.labels(val_idx))?)
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_ce,
            val_loss,
            lr: adam.lr,
        });
        epoch_seconds.push(started.elapsed().as_secs_f64());

        let monitored = val_loss.unwrap_or(train_ce);
        let decision = stopper.check(monitored);
        if matches!(decision, StopDecision::Continue { improved: true }) {
            best = current.clone();
            best_epoch = epoch;
        }
        adam.lr = sched.step(monitored);
        if decision == StopDecision::Stop || capped {
            break 'epochs;
        }
    }

    Ok(TrainOutcome {
        model: best,
        best_epoch,
        history,
        steps,
        epoch_seconds,
        optimizer: opt,
        touched,
    })
}
