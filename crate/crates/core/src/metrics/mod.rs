//! Top-1 / mean per-class accuracy, confusion matrices and a pooled
//! two-sample Student t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::FeatureDataset;
use crate::model::ModelState;
use crate::ndcore::NdError;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{preds} predictions for {truth} labels")]
    Length { preds: usize, truth: usize },
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    Label { index: usize, label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type MetricsResult<T> = Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    /// Mean over classes that have at least one evaluation example.
    pub mean_per_class: f64,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_eval: usize,
}

pub fn evaluate(preds: &[usize], truth: &[usize], classes: usize) -> MetricsResult<EvalResult> {
    if preds.len() != truth.len() {
        return Err(MetricsError::Length { preds: preds.len(), truth: truth.len() });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (index, (&p, &t)) in preds.iter().zip(truth).enumerate() {
        for label in [p, t] {
            if label >= classes {
                return Err(MetricsError::Label { index, label, classes });
            }
        }
        confusion[t][p] += 1;
    }
    let n = truth.len();
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    let mean = |v: f64, d: usize| if d == 0 { 0.0 } else { v / d as f64 };
    Ok(EvalResult {
        top1: mean(correct as f64, n),
        mean_per_class: mean(per_class.iter().sum(), per_class.len()),
        confusion,
        n_eval: n,
    })
}

/// Predicts with the adapter and classifier (no projection head).
pub fn evaluate_model<T: Scalar>(model: &ModelState<T>, ds: &FeatureDataset<T>) -> MetricsResult<EvalResult> {
    let preds = model.predict(&ds.features)?;
    evaluate(&preds, &ds.labels, model.classifier.num_classes())
}

/// Confusion matrix as CSV: header row `truth\pred,<names>`, one row per true class.
pub fn confusion_csv(result: &EvalResult, class_names: &[String]) -> MetricsResult<String> {
    if class_names.len() != result.confusion.len() {
        return Err(MetricsError::Invalid(format!(
            "{} class names for a {}-class confusion matrix",
            class_names.len(),
            result.confusion.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("truth\\pred").chain(class_names.iter().map(String::as_str)))?;
    for (name, row) in class_names.iter().zip(&result.confusion) {
        w.write_record(std::iter::once(name.clone()).chain(row.iter().map(usize::to_string)))?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Two-sided critical values of Student's t at α = 0.05, df = 1..=30.
const T_CRIT_05: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
    2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];

/// Two-sided critical value; tabulated for α = 0.05 and df ≤ 30, otherwise
/// the Student t quantile.
pub fn t_critical(df: usize, alpha: f64) -> MetricsResult<f64> {
    if df == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::Invalid(format!("need df >= 1 and alpha in (0, 1), got {df}, {alpha}")));
    }
    if alpha == 0.05 && df <= T_CRIT_05.len() {
        return Ok(T_CRIT_05[df - 1]);
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| MetricsError::Invalid(e.to_string()))?;
    Ok(dist.inverse_cdf(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// Positive when sample a has the larger mean; `±∞` for distinct means with zero variance.
    pub t: f64,
    pub df: usize,
    pub critical: f64,
    pub p_value: f64,
    /// `|t| ≥ critical`.
    pub significant: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Pooled-variance two-sample Student t-test, two-sided.
pub fn t_test(a: &[f64], b: &[f64], alpha: f64) -> MetricsResult<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::Invalid(format!(
            "t-test needs >= 2 points per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let df = a.len() + b.len() - 2;
    let critical = t_critical(df, alpha)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df as f64;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let t = if se > 0.0 {
        (ma - mb) / se
    } else if ma == mb {
        0.0
    } else {
        f64::INFINITY.copysign(ma - mb)
    };
    let p_value = if t.is_infinite() {
        0.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| MetricsError::Invalid(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(TTestResult { t, df, critical, p_value, significant: exceeds_critical(t, critical) })
}

/// Significance rule: a statistic exactly at the critical value counts.
pub fn exceeds_critical(t: f64, critical: f64) -> bool {
    t.abs() >= critical
}

/// A size-3 sample with the given mean and sample standard deviation: `{m − s, m, m + s}`.
pub fn reconstruct_triple(mean: f64, std: f64) -> [f64; 3] {
    [mean - std, mean, mean + std]
}
