//! Empirical checks of the classifier-distance bound, the backbone
//! displacement bound and the anchor-distribution sandwich, together with
//! the constants they depend on. Everything here runs in `f64`.

mod bounds;
mod probe;
mod spectrum;
mod suite;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::losses::LossError;
use crate::model::SnapshotError;
use crate::ndcore::NdError;
use crate::optim::OptimError;

pub use bounds::{
    estimate_constants, finetune_objective, verify_anchor_sandwich, verify_backbone_displacement,
    verify_classifier_drift, verify_drift_schedule, with_precondition, Constants,
};
pub use probe::{ce_hessian, probe_objective, solve_linear_probe, ProbeOptions, ProbeSolution};
pub use spectrum::{min_eigenvalue_power, symmetric_eigenvalues};
pub use suite::{run_bound_suite, sandwich_random_draws, BoundSuite, BoundSuiteConfig};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("linear probe did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("trace is too short: {0}")]
    TraceTooShort(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type TheoryResult<T> = Result<T, TheoryError>;

/// Relative slack allowed on the right-hand side of every bound.
pub const BOUND_SLACK: f64 = 1e-9;

/// Constants a report may carry, in CSV column order.
pub const CONSTANT_KEYS: [&str; 12] =
    ["m", "L", "delta", "epsilon", "eta0", "gamma", "c", "lr_sum", "closed_form_rhs", "L_tight", "residual", "slack"];

/// Measured sides of one inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs ≤ rhs·(1 + BOUND_SLACK)`.
    pub holds: bool,
    /// False when a precondition of the bound failed; such a report is
    /// never counted as a violation.
    pub applicable: bool,
    pub constants: BTreeMap<String, f64>,
    pub notes: String,
}

impl BoundReport {
    pub fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            holds: lhs <= rhs * (1.0 + BOUND_SLACK),
            applicable: true,
            constants: BTreeMap::new(),
            notes: String::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        assert!(CONSTANT_KEYS.contains(&key), "unknown report constant {key}");
        self.constants.insert(key.to_string(), value);
        self
    }

    pub fn note(mut self, text: &str) -> Self {
        if !self.notes.is_empty() {
            self.notes.push_str("; ");
        }
        self.notes.push_str(text);
        self
    }

    pub fn not_applicable(mut self, reason: &str) -> Self {
        self.applicable = false;
        self.note(&format!("not applicable: {reason}"))
    }

    pub fn constant(&self, key: &str) -> Option<f64> {
        self.constants.get(key).copied()
    }

    pub fn violated(&self) -> bool {
        self.applicable && !self.holds
    }

    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["name", "lhs", "rhs", "holds", "applicable"].iter().map(|s| s.to_string()).collect();
        h.extend(CONSTANT_KEYS.iter().map(|s| s.to_string()));
        h.push("notes".into());
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![
            self.name.clone(),
            self.lhs.to_string(),
            self.rhs.to_string(),
            self.holds.to_string(),
            self.applicable.to_string(),
        ];
        r.extend(CONSTANT_KEYS.iter().map(|k| self.constant(k).map_or_else(String::new, |v| v.to_string())));
        r.push(self.notes.clone());
        r
    }
}

/// One header line plus one row per report.
pub fn reports_to_csv(reports: &[BoundReport]) -> TheoryResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BoundReport::csv_header())?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    let bytes = w.into_inner().map_err(|e| TheoryError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holds_iff_lhs_within_slack() {
        assert!(BoundReport::new("a", 1.0, 1.0).holds);
        assert!(BoundReport::new("a", 1.0 + 1e-12, 1.0).holds);
        assert!(!BoundReport::new("a", 1.0 + 1e-6, 1.0).holds);
        assert!(BoundReport::new("a", 0.0, 0.0).holds);
        assert!(!BoundReport::new("a", f64::NAN, 1.0).holds);
        let r = BoundReport::new("a", 2.0, 1.0).not_applicable("x");
        assert!(!r.holds && !r.violated());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = BoundReport::new("t", 0.5, 1.0).with("m", 2.0).note("n, with comma");
        let text = reports_to_csv(&[r.clone(), r]).unwrap();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(rd.headers().unwrap().len(), 5 + CONSTANT_KEYS.len() + 1);
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][5], "2");
        assert_eq!(&rows[0][6], "");
        assert_eq!(rows[0].get(17), Some("n, with comma"));
    }
}
