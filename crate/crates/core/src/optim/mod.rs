//! SGD with momentum, cosine learning-rate decay, per-group learning rates,
//! the training loop and the hyperparameter grid search.

mod grid;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::losses::{Hyperparams, LossError, LossKind};
use crate::model::{ParamGroup, SnapshotError};
use crate::ndcore::NdError;
use crate::Scalar;

pub use grid::{grid_search, lambda_t_grid, lr_grid, weight_decay_grid, GridCell, GridResult, GridSpec};
pub use train::{train, train_with_reference, GroupTrace, TrainingTrace};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {t} exceeds schedule length {total}")]
    Schedule { t: usize, total: usize },
    #[error("non-finite gradient at step {step} in group {group} (norm {norm})")]
    NonFiniteGradient { step: usize, group: &'static str, norm: f64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("trace serialization: {0}")]
    Serde(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type OptimResult<T> = Result<T, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Initial learning rate of the adapter.
    pub eta0_backbone: f64,
    /// Initial learning rate of the classifier and the align map.
    pub eta0_classifier: f64,
    pub eta0_head: f64,
    /// L2 coefficient applied to every group.
    pub weight_decay: Option<f64>,
    /// Extra L2 coefficient on the classifier only.
    pub classifier_weight_decay: Option<f64>,
    /// Keep the adapter fixed (its learning rate is recorded as 0).
    pub freeze_backbone: bool,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub hyperparams: Hyperparams,
    /// Keep a snapshot every this many epochs.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            momentum: 0.9,
            eta0_backbone: 1e-3,
            eta0_classifier: 1e-2,
            eta0_head: 1e-2,
            weight_decay: None,
            classifier_weight_decay: None,
            freeze_backbone: false,
            seed: 0,
            loss_kind: LossKind::Ce,
            hyperparams: Hyperparams::default(),
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> OptimResult<()> {
        let bad = |m: String| Err(OptimError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        for (name, lr) in [
            ("eta0_backbone", self.eta0_backbone),
            ("eta0_classifier", self.eta0_classifier),
            ("eta0_head", self.eta0_head),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        for (name, wd) in
            [("weight_decay", self.weight_decay), ("classifier_weight_decay", self.classifier_weight_decay)]
        {
            if let Some(v) = wd {
                if !(v >= 0.0) || !v.is_finite() {
                    return bad(format!("{name} must be >= 0, got {v}"));
                }
            }
        }
        if self.snapshot_every == Some(0) {
            return bad("snapshot_every must be >= 1".into());
        }
        self.hyperparams.validate()?;
        Ok(())
    }

    pub fn eta0(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Adapter => self.eta0_backbone,
            ParamGroup::Classifier | ParamGroup::Align => self.eta0_classifier,
            ParamGroup::Head => self.eta0_head,
        }
    }

    pub fn weight_decay_for(&self, group: ParamGroup) -> f64 {
        let extra = if group == ParamGroup::Classifier { self.classifier_weight_decay.unwrap_or(0.0) } else { 0.0 };
        self.weight_decay.unwrap_or(0.0) + extra
    }
}

/// `η₀ · 0.5 · (1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, eta0: f64) -> OptimResult<f64> {
    if total == 0 || t > total {
        return Err(OptimError::Schedule { t, total });
    }
    Ok(eta0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Frobenius norm of the update direction `g + wd·p` that [`sgd_step`] would apply.
pub fn update_direction_norm<T: Scalar>(params: &[T], grads: &[T], weight_decay: f64) -> f64 {
    let wd = T::of(weight_decay);
    params.iter().zip(grads).map(|(&p, &g)| (g + wd * p).as_f64().powi(2)).sum::<f64>().sqrt()
}

/// `v ← μ v + (g + wd·p)`, `p ← p − lr·v`. Returns the norm of a non-finite gradient as the error.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), f64> {
    assert!(params.len() == grads.len() && params.len() == velocity.len(), "sgd_step shape mismatch");
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(grads.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt());
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    }
    Ok(())
}
