use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, make_splits, train, EpochRecord, FoldMetrics, MetricsReport, SplitParams, SplitPlan, SplitScheme, TrainConfig};
use crate::data::SegmentSet;
use crate::error::{Error, Result};
use crate::model::{Mactn, ModelConfig};

/// One independent train/evaluate job, expressed as segment indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldJob {
    pub name: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Seeds both the model initialization and the training stream.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub name: String,
    pub metrics: FoldMetrics,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: Vec<usize>,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub scheme: SplitScheme,
    /// One plan over subjects, or one plan per subject over its trials.
    pub plans: Vec<(String, SplitPlan)>,
    pub folds: Vec<FoldResult>,
    pub report: MetricsReport,
    /// Best-epoch model of each fold, in fold order.
    #[serde(skip)]
    pub models: Vec<Mactn>,
}

fn job_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Builds the split plans and fold jobs of `scheme` over `data`.
///
/// Subject-level schemes split subject ids once. Trial-level schemes split
/// each subject's trial ids separately; for ctv10 the validation set is a
/// seeded share of the training trials' segments.
pub fn fold_jobs(data: &SegmentSet, scheme: SplitScheme, seed: u64, params: &SplitParams) -> Result<(Vec<(String, SplitPlan)>, Vec<FoldJob>)> {
    if data.is_empty() {
        return Err(Error::Contract("no segments to split".into()));
    }
    let mut plans = Vec::new();
    let mut jobs = Vec::new();
    if scheme.is_subject_level() {
        let subjects = data.subjects();
        let plan = make_splits(scheme, &subjects, seed, params)?;
        let pick = |ids: &[String]| -> Vec<usize> {
            (0..data.len())
                .filter(|&i| ids.contains(&data.segments[i].subject_id))
                .collect()
        };
        for (k, f) in plan.folds.iter().enumerate() {
            jobs.push(FoldJob {
                name: format!("fold{:02}", k + 1),
                train: pick(&f.train),
                val: pick(&f.val),
                test: pick(&f.test),
                seed: job_seed(seed, k),
            });
        }
        plans.push(("all".to_string(), plan));
        return Ok((plans, jobs));
    }

    for (si, subject) in data.subjects().iter().enumerate() {
        let trials: Vec<String> = data.trials_of(subject).iter().map(|t| t.to_string()).collect();
        let plan = make_splits(scheme, &trials, seed.wrapping_add(si as u64), params)?;
        let pick = |ids: &[String]| -> Vec<usize> {
            (0..data.len())
                .filter(|&i| {
                    let s = &data.segments[i];
                    s.subject_id == *subject && ids.contains(&s.trial_id.to_string())
                })
                .collect()
        };
        for (k, f) in plan.folds.iter().enumerate() {
            let mut train_idx = pick(&f.train);
            let mut val_idx = pick(&f.val);
            if let Some(frac) = plan.segment_val_fraction {
                let mut rng = ChaCha8Rng::seed_from_u64(job_seed(seed, jobs.len()) ^ 0x5e6d);
                let mut shuffled = train_idx.clone();
                shuffled.shuffle(&mut rng);
                let n_val = (frac * shuffled.len() as f64).round() as usize;
                let held: BTreeSet<usize> = shuffled[..n_val].iter().copied().collect();
                val_idx.extend(held.iter().copied());
                val_idx.sort_unstable();
                train_idx.retain(|i| !held.contains(i));
            }
            let index = jobs.len();
            jobs.push(FoldJob {
                name: format!("{subject}/fold{:02}", k + 1),
                train: train_idx,
                val: val_idx,
                test: pick(&f.test),
                seed: job_seed(seed, index),
            });
        }
        plans.push((subject.clone(), plan));
    }
    Ok((plans, jobs))
}

/// Runs `f` over `jobs` on at most `workers` threads; results keep job order.
pub fn run_folds<J, T, F>(jobs: &[J], workers: usize, f: F) -> Vec<Result<T>>
where
    J: Sync,
    T: Send,
    F: Fn(usize, &J) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(i, &jobs[i]);
                slots.lock().expect("fold result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("fold result lock")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::Contract("fold job did not run".into()))))
        .collect()
}

/// Trains and tests one fresh model; returns the result and the best-epoch model.
pub fn run_job(data: &SegmentSet, model_cfg: &ModelConfig, train_cfg: &TrainConfig, job: &FoldJob) -> Result<(FoldResult, Mactn)> {
    let model = Mactn::new(model_cfg.clone(), job.seed)?;
    let cfg = TrainConfig {
        seed: job.seed,
        ..train_cfg.clone()
    };
    let out = train(&model, data, &job.train, &job.val, &cfg)?;
    if let Some(leak) = job.test.iter().find(|i| out.touched.contains(i)) {
        return Err(Error::Contract(format!("{}: test segment {leak} was used in training", job.name)));
    }
    let (metrics, predictions) = evaluate(&out.model, data, &job.test)?;
    let result = FoldResult {
        name: job.name.clone(),
        metrics,
        best_epoch: out.best_epoch,
        history: out.history,
        test: job.test.clone(),
        predictions,
    };
    Ok((result, out.model))
}

pub fn cross_validate(
    data: &SegmentSet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    scheme: SplitScheme,
    params: &SplitParams,
    workers: usize,
) -> Result<CvOutcome> {
    train_cfg.validate()?;
    let (plans, jobs) = fold_jobs(data, scheme, train_cfg.seed, params)?;
    let results = run_folds(&jobs, workers, |_, job| run_job(data, model_cfg, train_cfg, job));
    let (folds, models): (Vec<FoldResult>, Vec<Mactn>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let report = MetricsReport::new(
        folds.iter().map(|f| f.name.clone()).collect(),
        folds.iter().map(|f| f.metrics.clone()).collect(),
    )?;
    Ok(CvOutcome {
        scheme,
        plans,
        folds,
        report,
        models,
    })
}
