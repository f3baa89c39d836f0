//! Dense matrix math, softmax and normalization kernels, and the
//! finite-difference gradient oracle used to validate analytic gradients.

mod fd;
mod matrix;

pub use fd::{compare_gradients, finite_diff_gradient, GradCheckReport, DEFAULT_FD_STEP};
pub use matrix::{dot, norm, Matrix};

use thiserror::Error;

use crate::Scalar;

/// Rows with norm at or below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate row {index} (norm {norm:e}) cannot be normalized")]
    DegenerateRow { index: usize, norm: f64 },
    #[error("non-finite value in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("function evaluation returned a non-finite value at coordinate {coordinate}")]
    Evaluation { coordinate: usize },
}

pub type NdResult<T> = Result<T, NdError>;

/// Row-wise softmax of `logits / temperature` with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>, temperature: T) -> NdResult<Matrix<T>> {
    check_temperature(temperature)?;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax_rows<T: Scalar>(logits: &Matrix<T>, temperature: T) -> NdResult<Matrix<T>> {
    check_temperature(temperature)?;
    let mut out = logits.clone();
    for r in 0..out.rows() {
        log_softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

fn check_temperature<T: Scalar>(temperature: T) -> NdResult<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(NdError::Parameter(format!("temperature must be positive and finite, got {temperature}")));
    }
    Ok(())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], temperature: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T], temperature: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max) / temperature;
        sum += v.exp();
    }
    let lse = sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows<T: Scalar>(m: &Matrix<T>) -> NdResult<Matrix<T>> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = norm(out.row(r));
        if !(n.as_f64() > DEGENERATE_NORM) {
            return Err(NdError::DegenerateRow { index: r, norm: n.as_f64() });
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Scales every column to unit Euclidean norm; a degenerate column is
/// reported with its column index.
pub fn l2_normalize_cols<T: Scalar>(m: &Matrix<T>) -> NdResult<Matrix<T>> {
    Ok(l2_normalize_rows(&m.transpose())?.transpose())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
