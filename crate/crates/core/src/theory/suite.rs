use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::losses::LossKind;
use crate::model::{ClassifierInit, ModelDims, ModelState};
use crate::ndcore::Matrix;
use crate::optim::{train, TrainConfig, TrainingTrace};
use crate::rng::{derive_seed, gaussian, rng_from_seed};

use super::{
    estimate_constants, finetune_objective, solve_linear_probe, verify_anchor_sandwich, verify_backbone_displacement,
    verify_classifier_drift, verify_drift_schedule, with_precondition, BoundReport, Constants, ProbeOptions,
    ProbeSolution, TheoryError, TheoryResult,
};

/// Settings of one verification run: a linear probe, then full-batch
/// plain-SGD fine-tuning of adapter and classifier on `CE + μ‖W‖²`
/// starting from the probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSuiteConfig {
    pub mu: f64,
    pub eta0_backbone: f64,
    pub eta0_classifier: f64,
    pub epochs: usize,
    pub lipschitz_samples: usize,
    pub probe_tol: f64,
    pub probe_max_iter: usize,
    pub seed: u64,
}

impl Default for BoundSuiteConfig {
    fn default() -> Self {
        Self {
            mu: 1e-2,
            eta0_backbone: 1e-3,
            eta0_classifier: 1e-1,
            epochs: 100,
            lipschitz_samples: 64,
            probe_tol: 1e-10,
            probe_max_iter: 200_000,
            seed: 0,
        }
    }
}

impl BoundSuiteConfig {
    pub fn train_config(&self, n: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: n.max(1),
            momentum: 0.0,
            eta0_backbone: self.eta0_backbone,
            eta0_classifier: self.eta0_classifier,
            eta0_head: self.eta0_classifier,
            weight_decay: None,
            // SGD decay `wd·W` is the gradient of `(wd/2)‖W‖²`
            classifier_weight_decay: Some(2.0 * self.mu),
            freeze_backbone: false,
            seed: self.seed,
            loss_kind: LossKind::Ce,
            hyperparams: Default::default(),
            snapshot_every: Some((self.epochs / 10).max(1)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundSuite {
    pub probe: ProbeSolution,
    pub constants: Constants,
    pub trace: TrainingTrace,
    pub probe_objective: f64,
    pub finetuned_objective: f64,
    /// `‖Wᵀ − W⁰‖²_F`.
    pub classifier_distance_sq: f64,
    pub reports: Vec<BoundReport>,
}

impl BoundSuite {
    pub fn any_violated(&self) -> bool {
        self.reports.iter().any(BoundReport::violated)
    }

    pub fn report(&self, name: &str) -> Option<&BoundReport> {
        self.reports.iter().find(|r| r.name == name)
    }
}

/// Probe, fine-tune and check every bound on `ds`.
pub fn run_bound_suite(ds: &FeatureDataset<f64>, cfg: &BoundSuiteConfig) -> TheoryResult<BoundSuite> {
    if ds.is_empty() {
        return Err(TheoryError::Invalid("empty dataset".into()));
    }
    let opts = ProbeOptions { tol: cfg.probe_tol, max_iter: cfg.probe_max_iter, init: None };
    let probe = solve_linear_probe(&ds.features, &ds.labels, ds.num_classes(), cfg.mu, &opts)?;

    let dims =
        ModelDims { raw_dim: ds.dim(), dim: ds.dim(), classes: ds.num_classes(), hidden_dim: 4, text_dim: ds.dim() };
    let mut model = ModelState::init(dims, ClassifierInit::Zeros, &mut rng_from_seed(cfg.seed))?;
    model.classifier.weights = probe.weights.clone();
    let probe_objective = finetune_objective(&model, ds, cfg.mu)?;

    let (tuned, trace) = train(&cfg.train_config(ds.len()), ds, None, model, None)?;
    let finetuned_objective = finetune_objective(&tuned, ds, cfg.mu)?;
    let constants = estimate_constants(ds, cfg.mu, &probe.weights, &trace, cfg.lipschitz_samples, cfg.seed)?;
    let wt = &tuned.classifier.weights;

    let drift = verify_classifier_drift(
        &probe.weights,
        wt,
        constants.m,
        constants.lipschitz,
        constants.epsilon,
        probe.grad_norm,
    )?;
    let drift = with_precondition(drift, finetuned_objective, probe_objective);
    let displacement = verify_backbone_displacement(&trace)?;
    let schedule = verify_drift_schedule(&drift, &displacement)?;
    let sandwich = verify_anchor_sandwich(&tuned.adapter.forward(&ds.features)?, wt, &ds.labels)?;
    let classifier_distance_sq = drift.lhs;
    Ok(BoundSuite {
        probe,
        constants,
        trace,
        probe_objective,
        finetuned_objective,
        classifier_distance_sq,
        reports: vec![drift, displacement, schedule, sandwich],
    })
}

/// Sandwich check on `draws` independent Gaussian `(X, W)` pairs with
/// uniform labels; returns the worst report.
pub fn sandwich_random_draws(
    draws: usize,
    examples: usize,
    dim: usize,
    classes: usize,
    seed: u64,
) -> TheoryResult<BoundReport> {
    if draws == 0 || classes == 0 {
        return Err(TheoryError::Invalid("need at least one draw and one class".into()));
    }
    let mut worst: Option<BoundReport> = None;
    for t in 0..draws {
        let mut rng = rng_from_seed(derive_seed(seed, t as u64));
        let x = Matrix::from_fn(examples, dim, |_, _| gaussian::<f64>(&mut rng));
        let w = Matrix::from_fn(dim, classes, |_, _| gaussian::<f64>(&mut rng));
        let labels: Vec<usize> = (0..examples).map(|_| rng.random_range(0..classes)).collect();
        let r = verify_anchor_sandwich(&x, &w, &labels)?;
        let slack = |r: &BoundReport| r.constant("slack").unwrap_or(0.0);
        if worst.as_ref().is_none_or(|b| slack(&r) > slack(b)) {
            worst = Some(r);
        }
    }
    let mut r = worst.expect("at least one draw");
    r.name = "anchor_sandwich_random".into();
    Ok(r.note(&format!("worst of {draws} draws")))
}
