//! Training objectives with values and analytic gradients.
//!
//! | kind | objective |
//! |---|---|
//! | `CE` | mean cross entropy of `X·W` |
//! | `LS` | cross entropy against uniformly smoothed labels |
//! | `TLS` | cross entropy against labels smoothed by the text class distribution |
//! | `TES_M` | CE + `λ‖h(W) − Z‖²_F` with a learned linear `h` |
//! | `TES_C` | CE + `λ` × class-level cross entropy of vision rows against text rows |
//! | `TES` | `(1−λ_V)` CE + `λ_V` instance distillation from the text head + `λ_T ℓ_T` |
//!
//! All objectives take raw features and the full [`ModelState`], so the
//! returned gradients cover every parameter group, including the adapter.

mod classification;
pub mod distributions;
pub mod gradcheck;
mod objectives;

pub use classification::{ce_loss, smoothed_targets, soft_target_ce, LogitLoss, SmoothingMode};
pub use distributions::{class_distributions, instance_text_distribution, instance_vision_distribution, TextReference};
pub use objectives::{
    class_level_regularizer, objective, tes_c_objective, tes_m_objective, tes_objective, text_head_distribution,
    text_projection_loss, zero_shot_predict, Teacher,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelState, ParamGroup};
use crate::ndcore::NdError;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("{labels} labels for {rows} feature rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("{0} requires text proxies")]
    MissingTextReference(&'static str),
    #[error("distribution row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("{what} row {index} has norm {norm}, expected unit norm")]
    NotNormalized { what: &'static str, index: usize, norm: f64 },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparam(String),
}

pub type LossResult<T> = Result<T, LossError>;

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> LossResult<()> {
    if labels.len() != rows {
        return Err(LossError::LabelCount { labels: labels.len(), rows });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange { index, label, classes });
    }
    Ok(())
}

/// Objective weights and temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Weight of the instance-level distillation term, in `[0, 1]`.
    pub lambda_v: f64,
    /// Weight of the text-projection loss, `≥ 0`.
    pub lambda_t: f64,
    /// Text temperature `τ′`.
    pub tau_text: f64,
    /// Vision temperature `τ` of the class-level distribution.
    pub tau_vision: f64,
    /// Weight of the proxy-matching / class-level regularizer.
    pub reg_lambda: f64,
    /// Label-smoothing weight for `LS`/`TLS`, in `[0, 1)`.
    pub ls_epsilon: f64,
    /// Whether the text-projection loss back-propagates into the adapter.
    pub propagate_lt_to_adapter: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_v: 0.1,
            lambda_t: 0.7,
            tau_text: 0.03,
            tau_vision: 1.0,
            reg_lambda: 0.1,
            ls_epsilon: 0.1,
            propagate_lt_to_adapter: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> LossResult<()> {
        let bad = |msg: String| Err(LossError::InvalidHyperparam(msg));
        if !(0.0..=1.0).contains(&self.lambda_v) {
            return bad(format!("lambda_v must be in [0, 1], got {}", self.lambda_v));
        }
        if !(self.lambda_t >= 0.0) || !self.lambda_t.is_finite() {
            return bad(format!("lambda_t must be >= 0, got {}", self.lambda_t));
        }
        if !(self.tau_text > 0.0) || !self.tau_text.is_finite() {
            return bad(format!("tau_text must be > 0, got {}", self.tau_text));
        }
        if !(self.tau_vision > 0.0) || !self.tau_vision.is_finite() {
            return bad(format!("tau_vision must be > 0, got {}", self.tau_vision));
        }
        if !(self.reg_lambda >= 0.0) || !self.reg_lambda.is_finite() {
            return bad(format!("reg_lambda must be >= 0, got {}", self.reg_lambda));
        }
        if !(0.0..1.0).contains(&self.ls_epsilon) {
            return bad(format!("ls_epsilon must be in [0, 1), got {}", self.ls_epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "TLS")]
    Tls,
    #[serde(rename = "TES_M")]
    TesM,
    #[serde(rename = "TES_C")]
    TesC,
    #[serde(rename = "TES")]
    Tes,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [Self::Ce, Self::Ls, Self::Tls, Self::TesM, Self::TesC, Self::Tes];

    pub fn needs_text(self) -> bool {
        !matches!(self, Self::Ce | Self::Ls)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "CE",
            Self::Ls => "LS",
            Self::Tls => "TLS",
            Self::TesM => "TES_M",
            Self::TesC => "TES_C",
            Self::Tes => "TES",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LossError::InvalidHyperparam(format!("unknown loss kind {s:?}")))
    }
}

/// Flat gradients for every parameter group, laid out as [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub adapter: Vec<T>,
    pub classifier: Vec<T>,
    pub head: Vec<T>,
    pub align: Vec<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(model: &ModelState<T>) -> Self {
        Self {
            adapter: vec![T::zero(); model.num_params(ParamGroup::Adapter)],
            classifier: vec![T::zero(); model.num_params(ParamGroup::Classifier)],
            head: vec![T::zero(); model.num_params(ParamGroup::Head)],
            align: vec![T::zero(); model.num_params(ParamGroup::Align)],
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[T] {
        match g {
            ParamGroup::Adapter => &self.adapter,
            ParamGroup::Classifier => &self.classifier,
            ParamGroup::Head => &self.head,
            ParamGroup::Align => &self.align,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<T> {
        match g {
            ParamGroup::Adapter => &mut self.adapter,
            ParamGroup::Classifier => &mut self.classifier,
            ParamGroup::Head => &mut self.head,
            ParamGroup::Align => &mut self.align,
        }
    }

    /// All groups concatenated in [`ParamGroup::ALL`] order.
    pub fn flatten(&self) -> Vec<T> {
        ParamGroup::ALL.iter().flat_map(|&g| self.group(g).iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grads: Grads<T>,
    pub per_example: Option<Vec<T>>,
}
