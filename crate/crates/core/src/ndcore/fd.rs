//! Central finite differences and gradient comparison.

use serde::{Deserialize, Serialize};

use super::{NdError, NdResult};
use crate::Scalar;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_diff_gradient<T, F>(f: F, x: &[T], h: T) -> NdResult<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    if !(h > T::zero()) {
        return Err(NdError::Parameter(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NdError::Evaluation { coordinate: i });
        }
        grad.push((up - down) / two_h);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    /// Max over entries of `|a − n| / max(1e-12, |a| + |n|)`.
    pub max_rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

pub fn compare_gradients<T: Scalar>(analytic: &[T], numeric: &[T]) -> NdResult<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(NdError::Shape { op: "compare_gradients", left: (analytic.len(), 1), right: (numeric.len(), 1) });
    }
    let mut report = GradCheckReport { max_abs_error: 0.0, max_rel_error: 0.0, analytic_norm: 0.0, numeric_norm: 0.0 };
    let (mut a2, mut n2) = (0.0, 0.0);
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.as_f64(), n.as_f64());
        let abs = (a - n).abs();
        let rel = abs / (a.abs() + n.abs()).max(1e-12);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        a2 += a * a;
        n2 += n * n;
    }
    report.analytic_norm = a2.sqrt();
    report.numeric_norm = n2.sqrt();
    Ok(report)
}
