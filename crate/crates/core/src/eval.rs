//! Decision rules and evaluation metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureBlock, LabeledDataset, PosteriorMatrix};
use crate::error::{ensure_dim, Error, Result};
use crate::softmax::{fit_hard, predict_proba, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecisionRule {
    /// Binary only: label 1 iff `P(y=1|·) > t`, otherwise label 2.
    Threshold(f64),
    /// Argmax over classes, lowest index on ties.
    Bayes,
}

/// Predicted 1-based labels.
pub fn classify(posterior: &PosteriorMatrix, rule: DecisionRule) -> Result<Vec<usize>> {
    let probs = posterior.probs();
    match rule {
        DecisionRule::Threshold(t) => {
            ensure_dim("classes for a threshold rule", 2, posterior.n_classes())?;
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid(format!("threshold must lie in (0, 1), got {t}")));
            }
            Ok(probs.column(0).iter().map(|&p| if p > t { 1 } else { 2 }).collect())
        }
        DecisionRule::Bayes => Ok(probs
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best + 1
            })
            .collect()),
    }
}

/// Binary rule thresholded at the method's own estimated prior `mean(P(y=1|·))`.
pub fn classify_at_estimated_prior(posterior: &PosteriorMatrix) -> Result<Vec<usize>> {
    ensure_dim("classes for a threshold rule", 2, posterior.n_classes())?;
    let prior = posterior.mean_prior()[0];
    classify(posterior, DecisionRule::Threshold(prior))
}

/// Mean of per-class recalls over classes `1..=n_classes`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    ensure_dim("prediction length", y_true.len(), y_pred.len())?;
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == 0 || t > n_classes || p == 0 || p > n_classes {
            return Err(Error::invalid(format!("labels must lie in 1..={n_classes}")));
        }
        totals[t - 1] += 1;
        hits[t - 1] += usize::from(t == p);
    }
    let mut sum = 0.0;
    for c in 0..n_classes {
        if totals[c] == 0 {
            return Err(Error::UndefinedRecall { class: c + 1 });
        }
        sum += hits[c] as f64 / totals[c] as f64;
    }
    Ok(sum / n_classes as f64)
}

/// Mean absolute difference of class-1 posteriors.
pub fn approximation_error(method: &PosteriorMatrix, oracle: &PosteriorMatrix) -> Result<f64> {
    ensure_dim("posterior rows", oracle.n_rows(), method.n_rows())?;
    ensure_dim("posterior classes", oracle.n_classes(), method.n_classes())?;
    if method.n_rows() == 0 {
        return Err(Error::invalid("approximation error over zero rows"));
    }
    let total: f64 = method
        .class_column(1)
        .iter()
        .zip(oracle.class_column(1).iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / method.n_rows() as f64)
}

/// Posterior of a model trained on the target rows with their labels.
pub fn fit_oracle(target_with_labels: &LabeledDataset, config: &FitConfig) -> Result<PosteriorMatrix> {
    let params = fit_hard(target_with_labels, FeatureBlock::Joint, config)?;
    predict_proba(&params, target_with_labels.joint_features().view())
}

/// One method evaluated on one generated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub a: f64,
    pub k: f64,
    pub n: usize,
    pub seed: u64,
    pub balanced_accuracy: f64,
    pub approx_error: f64,
    pub wall_clock_seconds: f64,
    /// Set when the run failed; metrics are then NaN.
    #[serde(default)]
    pub error: Option<String>,
}

/// Mean and sample standard deviation of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub a: f64,
    pub k: f64,
    pub n: usize,
    pub runs: usize,
    pub failures: usize,
    pub balanced_accuracy_mean: f64,
    pub balanced_accuracy_std: f64,
    pub approx_error_mean: f64,
    pub approx_error_std: f64,
    pub wall_clock_mean: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Groups rows by `(method, a, k, n)`; failed rows are counted, not averaged.
pub fn summarize(rows: &[MetricRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, f64, f64, usize)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.a, r.k, r.n);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by(|x, y| {
        x.1.total_cmp(&y.1)
            .then(x.2.total_cmp(&y.2))
            .then(x.3.cmp(&y.3))
            .then(x.0.cmp(&y.0))
    });
    keys.into_iter()
        .map(|(method, a, k, n)| {
            let cell: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| r.method == method && r.a == a && r.k == k && r.n == n)
                .collect();
            let ok: Vec<&MetricRow> = cell.iter().copied().filter(|r| r.error.is_none()).collect();
            let pick = |f: fn(&MetricRow) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (ba_m, ba_s) = mean_std(&pick(|r| r.balanced_accuracy));
            let (ae_m, ae_s) = mean_std(&pick(|r| r.approx_error));
            let (wc_m, _) = mean_std(&pick(|r| r.wall_clock_seconds));
            CellSummary {
                method,
                a,
                k,
                n,
                runs: cell.len(),
                failures: cell.len() - ok.len(),
                balanced_accuracy_mean: ba_m,
                balanced_accuracy_std: ba_s,
                approx_error_mean: ae_m,
                approx_error_std: ae_s,
                wall_clock_mean: wc_m,
            }
        })
        .collect()
}

/// Helper for tests and callers holding raw class-1 probabilities.
pub fn binary_posterior(class_one: &[f64]) -> Result<PosteriorMatrix> {
    let mut probs = Array2::zeros((class_one.len(), 2));
    for (i, &p) in class_one.iter().enumerate() {
        probs[[i, 0]] = p;
        probs[[i, 1]] = 1.0 - p;
    }
    PosteriorMatrix::new(probs)
}
