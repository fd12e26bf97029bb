use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test metrics of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    /// Macro-averaged F1.
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics_from_predictions(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<FoldMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Contract("no samples to score".into()));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label >= n_classes {
                return Err(Error::InvalidLabel { label, n_classes });
            }
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let f1_sum: f64 = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .sum();
    Ok(FoldMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        f1: f1_sum / n_classes as f64,
        confusion,
    })
}

/// Index of the largest value in each row of a `(B, classes)` array.
pub fn argmax_rows(values: &[f64], n_classes: usize) -> Vec<usize> {
    values
        .chunks(n_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Per-fold metrics with mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold_names: Vec<String>,
    pub folds: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

impl MetricsReport {
    pub fn new(fold_names: Vec<String>, folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() || fold_names.len() != folds.len() {
            return Err(Error::Contract("report needs one name per fold and at least one fold".into()));
        }
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_f1, std_f1) = mean_std(&f1);
        Ok(Self {
            fold_names,
            folds,
            mean_accuracy,
            std_accuracy,
            mean_f1,
            std_f1,
        })
    }

    /// Plain-text table, one row per fold, percentages, mean ± std footer.
    pub fn to_table(&self) -> String {
        let w = self.fold_names.iter().map(String::len).max().unwrap_or(4).max(4);
        let mut s = format!("{:<w$}  {:>13}  {:>13}\n", "fold", "ACC (%)", "F1 (%)");
        for (name, f) in self.fold_names.iter().zip(&self.folds) {
            s += &format!("{name:<w$}  {:>13.1}  {:>13.1}\n", 100.0 * f.accuracy, 100.0 * f.f1);
        }
        s += &format!(
            "{:<w$}  {:>13}  {:>13}\n",
            "mean",
            format!("{:.1} ± {:.1}", 100.0 * self.mean_accuracy, 100.0 * self.std_accuracy),
            format!("{:.1} ± {:.1}", 100.0 * self.mean_f1, 100.0 * self.std_f1),
        );
        s
    }
}
