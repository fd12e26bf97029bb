use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-validation protocols. The first two split subjects, the last two
/// split the trials of one subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// 10-fold cross-subject.
    Csv10,
    /// Leave one subject out.
    Loso,
    /// Leave one trial out.
    Loto,
    /// 10-fold cross-trial.
    Ctv10,
}

impl SplitScheme {
    pub fn is_subject_level(self) -> bool {
        matches!(self, Self::Csv10 | Self::Loso)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Csv10 => "csv10",
            Self::Loso => "loso",
            Self::Loto => "loto",
            Self::Ctv10 => "ctv10",
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv10" => Ok(Self::Csv10),
            "loso" => Ok(Self::Loso),
            "loto" => Ok(Self::Loto),
            "ctv10" => Ok(Self::Ctv10),
            other => Err(Error::Config(format!("unknown split scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub n_folds: usize,
    /// Share of the non-test ids moved to validation. `None` picks the
    /// scheme default: 0.2 for loso, 0 otherwise.
    pub val_fraction: Option<f64>,
    /// ctv10 only: share of the training trials' segments held out for
    /// validation.
    pub segment_val_fraction: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            n_folds: 10,
            val_fraction: None,
            segment_val_fraction: 0.2,
        }
    }
}

impl SplitParams {
    pub fn val_fraction_for(&self, scheme: SplitScheme) -> f64 {
        self.val_fraction.unwrap_or(match scheme {
            SplitScheme::Loso => 0.2,
            _ => 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    pub folds: Vec<Fold>,
    /// Set for ctv10: validation comes from the training trials' segments.
    pub segment_val_fraction: Option<f64>,
}

impl SplitPlan {
    /// Checks disjointness within folds and that each id is tested once.
    pub fn validate(&self, ids: &[String]) -> Result<()> {
        let mut tested: Vec<&String> = Vec::new();
        for (i, f) in self.folds.iter().enumerate() {
            let all: Vec<&String> = f.train.iter().chain(&f.val).chain(&f.test).collect();
            let mut sorted = all.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != all.len() {
                return Err(Error::Contract(format!("fold {i} reuses an id across train/val/test")));
            }
            if let Some(x) = all.iter().find(|x| !ids.contains(x)) {
                return Err(Error::Contract(format!("fold {i} names unknown id `{x}`")));
            }
            tested.extend(&f.test);
        }
        tested.sort();
        let mut expect: Vec<&String> = ids.iter().collect();
        expect.sort();
        if tested != expect {
            return Err(Error::Contract("test sets do not cover every id exactly once".into()));
        }
        Ok(())
    }
}

fn too_small(scheme: SplitScheme, reason: String) -> Error {
    Error::SplitTooSmall {
        scheme: scheme.name().into(),
        reason,
    }
}

/// Splits `rest` into (train, val) with `round(fraction * len)` val ids,
/// chosen by a seeded shuffle; both keep the input order.
fn carve_val(rest: &[String], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let n_val = (fraction * rest.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..rest.len()).collect();
    order.shuffle(rng);
    let mut is_val = vec![false; rest.len()];
    for &i in &order[..n_val.min(rest.len())] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, id) in rest.iter().enumerate() {
        if is_val[i] {
            val.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    (train, val)
}

/// Shuffled partition into `k` groups whose sizes differ by at most one.
fn k_groups(ids: &[String], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(rng);
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let size = base + usize::from(g < extra);
        let mut grp = order[start..start + size].to_vec();
        grp.sort_unstable();
        groups.push(grp);
        start += size;
    }
    groups
}

pub fn make_splits(scheme: SplitScheme, ids: &[String], seed: u64, params: &SplitParams) -> Result<SplitPlan> {
    let n = ids.len();
    let mut uniq: Vec<&String> = ids.iter().collect();
    uniq.sort();
    uniq.dedup();
    if uniq.len() != n {
        return Err(Error::Contract("split ids must be unique".into()));
    }
    let frac = params.val_fraction_for(scheme);
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Config(format!("validation fraction {frac} not in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_groups: Vec<Vec<usize>> = match scheme {
        SplitScheme::Csv10 | SplitScheme::Ctv10 => {
            if params.n_folds < 2 || n < params.n_folds {
                return Err(too_small(
                    scheme,
                    format!("{n} ids cannot fill {} folds", params.n_folds),
                ));
            }
            k_groups(ids, params.n_folds, &mut rng)
        }
        SplitScheme::Loso | SplitScheme::Loto => {
            if n < 2 {
                return Err(too_small(scheme, format!("{n} ids leave nothing to train on")));
            }
            (0..n).map(|i| vec![i]).collect()
        }
    };
    let mut folds = Vec::with_capacity(test_groups.len());
    for grp in test_groups {
        let test: Vec<String> = grp.iter().map(|&i| ids[i].clone()).collect();
        let rest: Vec<String> = (0..n).filter(|i| !grp.contains(i)).map(|i| ids[i].clone()).collect();
        let (train, val) = carve_val(&rest, frac, &mut rng);
        if train.is_empty() {
            return Err(too_small(scheme, "a fold has no training ids".into()));
        }
        folds.push(Fold { train, val, test });
    }
    let plan = SplitPlan {
        scheme,
        folds,
        segment_val_fraction: (scheme == SplitScheme::Ctv10).then_some(params.segment_val_fraction),
    };
    plan.validate(ids)?;
    Ok(plan)
}
