use rand::Rng;

use crate::data::FeatureDataset;
use crate::losses::ce_loss;
use crate::model::{parameter_distance, DistanceGroup, ModelState, ParamGroup};
use crate::ndcore::{log_softmax_rows, norm, Matrix};
use crate::optim::TrainingTrace;
use crate::rng::{gaussian, rng_from_seed};

use super::{ce_hessian, symmetric_eigenvalues, BoundReport, TheoryError, TheoryResult};

/// Constants of the classifier-drift bound estimated from a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Constants {
    /// `2μ + λ_min` of the cross-entropy Hessian at `W⁰`.
    pub m: f64,
    pub hessian_min_eigenvalue: f64,
    /// Twice the largest sampled difference quotient of the loss in θ at `Wᵀ`.
    pub lipschitz: f64,
    /// Largest recorded adapter update-direction norm.
    pub delta: f64,
    /// `‖θ⁰ − θᵀ‖_F` over the adapter.
    pub epsilon: f64,
    /// Number of parameter pairs behind `lipschitz`.
    pub pairs: usize,
}

/// `CE(adapter(X)·W) + μ‖W‖²_F` for the model's adapter and classifier.
pub fn finetune_objective(model: &ModelState<f64>, ds: &FeatureDataset<f64>, mu: f64) -> TheoryResult<f64> {
    let x = model.adapter.forward(&ds.features)?;
    let w = &model.classifier.weights;
    Ok(ce_loss(&x.matmul(w)?, &ds.labels)?.value + mu * w.frobenius_norm().powi(2))
}

/// Estimates `m`, `L` and `δ` for a run that started with classifier
/// `w0` and produced `trace`. `L` is sampled over all pairs of traced
/// snapshots (which include `θ⁰` and `θᵀ`) plus `samples` random pairs
/// inside the ball of radius `ε` around `θ⁰`.
pub fn estimate_constants(
    ds: &FeatureDataset<f64>,
    mu: f64,
    w0: &Matrix<f64>,
    trace: &TrainingTrace,
    samples: usize,
    seed: u64,
) -> TheoryResult<Constants> {
    if trace.step_loss.is_empty() {
        return Err(TheoryError::TraceTooShort("no steps recorded".into()));
    }
    if !(mu > 0.0) {
        return Err(TheoryError::Invalid(format!("mu must be > 0, got {mu}")));
    }
    let initial = ModelState::<f64>::from_snapshot(&trace.initial)?;
    let last = ModelState::<f64>::from_snapshot(&trace.final_snapshot)?;
    let x0 = initial.adapter.forward(&ds.features)?;
    let lambda_min = symmetric_eigenvalues(&ce_hessian(&x0, w0)?)?[0];
    let epsilon = parameter_distance(&trace.initial, &trace.final_snapshot, DistanceGroup::Adapter)?;
    let delta = trace.max_grad_norm(ParamGroup::Adapter);

    let wt = &last.classifier.weights;
    let mut probe = last.clone();
    let mut loss_at = |theta: &[f64]| -> TheoryResult<f64> {
        probe.set_params(ParamGroup::Adapter, theta)?;
        let x = probe.adapter.forward(&ds.features)?;
        Ok(ce_loss(&x.matmul(wt)?, &ds.labels)?.value)
    };

    let mut anchors = vec![initial.params(ParamGroup::Adapter)];
    for snap in &trace.periodic {
        anchors.push(ModelState::<f64>::from_snapshot(snap)?.params(ParamGroup::Adapter));
    }
    anchors.push(last.params(ParamGroup::Adapter));
    let mut points = anchors.clone();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..anchors.len() {
        for j in (i + 1)..anchors.len() {
            pairs.push((i, j));
        }
    }
    if epsilon > 0.0 {
        let mut rng = rng_from_seed(seed);
        let theta0 = &anchors[0];
        for _ in 0..samples {
            for _ in 0..2 {
                let u: Vec<f64> = (0..theta0.len()).map(|_| gaussian(&mut rng)).collect();
                let r = epsilon * rng.random::<f64>() / norm(&u);
                points.push(theta0.iter().zip(&u).map(|(t, v)| t + r * v).collect());
            }
            pairs.push((points.len() - 2, points.len() - 1));
        }
    }
    let values: Vec<f64> = points.iter().map(|p| loss_at(p)).collect::<TheoryResult<_>>()?;
    let mut best: f64 = 0.0;
    let mut used = 0;
    for (i, j) in pairs {
        let dist = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist > 0.0 {
            best = best.max((values[i] - values[j]).abs() / dist);
            used += 1;
        }
    }
    Ok(Constants {
        m: 2.0 * mu + lambda_min,
        hessian_min_eigenvalue: lambda_min,
        lipschitz: 2.0 * best,
        delta,
        epsilon,
        pairs: used,
    })
}

/// `‖Wᵀ − W⁰‖²_F ≤ (L/m)·ε`. `residual` is the gradient norm left at the
/// computed `W⁰`; it adds `(2/m)·residual·‖Wᵀ − W⁰‖` to the right side,
/// which is what strong convexity gives for an inexact minimizer.
pub fn verify_classifier_drift(
    w0: &Matrix<f64>,
    wt: &Matrix<f64>,
    m: f64,
    l: f64,
    epsilon: f64,
    residual: f64,
) -> TheoryResult<BoundReport> {
    if !(m > 0.0) || !(l >= 0.0) || !(epsilon >= 0.0) || !(residual >= 0.0) {
        return Err(TheoryError::Invalid(format!(
            "constants must be positive (m = {m}, L = {l}, epsilon = {epsilon}, residual = {residual})"
        )));
    }
    let dist = wt.sub(w0)?.frobenius_norm();
    let lhs = dist * dist;
    let rhs = l / m * epsilon + 2.0 / m * residual * dist;
    let mut r = BoundReport::new("classifier_drift", lhs, rhs)
        .with("m", m)
        .with("L", l)
        .with("epsilon", epsilon)
        .with("residual", residual)
        .with("slack", ratio(lhs, rhs))
        .note("L is a sampled lower estimate");
    if epsilon > 0.0 {
        r = r.with("L_tight", lhs * m / epsilon);
    }
    Ok(r)
}

/// Marks a classifier-drift report not applicable unless the fine-tuned
/// objective is no worse than the probe objective.
pub fn with_precondition(report: BoundReport, finetuned: f64, probe: f64) -> BoundReport {
    if finetuned <= probe {
        report
    } else {
        report.not_applicable(&format!("fine-tuned objective {finetuned} exceeds probe objective {probe}"))
    }
}

/// `‖θ⁰ − θᵀ‖_F ≤ Σₜ ηₜ · δ` over the adapter of a momentum-free run; the
/// cosine closed form `0.5·η₀·π·δ` is reported next to it.
pub fn verify_backbone_displacement(trace: &TrainingTrace) -> TheoryResult<BoundReport> {
    if trace.config.momentum != 0.0 {
        return Err(TheoryError::Precondition(format!(
            "the displacement bound needs plain SGD, trace has momentum {}",
            trace.config.momentum
        )));
    }
    if trace.step_loss.is_empty() {
        return Err(TheoryError::TraceTooShort("no steps recorded".into()));
    }
    let lhs = parameter_distance(&trace.initial, &trace.final_snapshot, DistanceGroup::Adapter)?;
    let g = trace.group(ParamGroup::Adapter);
    let delta = trace.max_grad_norm(ParamGroup::Adapter);
    let lr_sum = trace.lr_sum(ParamGroup::Adapter);
    let rhs = lr_sum * delta;
    Ok(BoundReport::new("backbone_displacement", lhs, rhs)
        .with("epsilon", lhs)
        .with("delta", delta)
        .with("eta0", g.eta0)
        .with("lr_sum", lr_sum)
        .with("closed_form_rhs", 0.5 * g.eta0 * std::f64::consts::PI * delta)
        .with("slack", ratio(lhs, rhs))
        .note("closed form reported, not asserted"))
}

/// `‖Wᵀ − W⁰‖²_F ≤ η₀πδL/(2m)`, composed from a classifier-drift and a
/// displacement report.
pub fn verify_drift_schedule(drift: &BoundReport, displacement: &BoundReport) -> TheoryResult<BoundReport> {
    let get = |r: &BoundReport, key: &str| {
        r.constant(key).ok_or_else(|| TheoryError::Invalid(format!("report {} lacks constant {key}", r.name)))
    };
    let (m, l, residual) = (get(drift, "m")?, get(drift, "L")?, get(drift, "residual")?);
    let (eta0, delta) = (get(displacement, "eta0")?, get(displacement, "delta")?);
    if !(m > 0.0) {
        return Err(TheoryError::Invalid(format!("m must be > 0, got {m}")));
    }
    let lhs = drift.lhs;
    let rhs = eta0 * std::f64::consts::PI * delta * l / (2.0 * m) + 2.0 / m * residual * lhs.sqrt();
    let mut r = BoundReport::new("classifier_drift_schedule", lhs, rhs)
        .with("m", m)
        .with("L", l)
        .with("delta", delta)
        .with("eta0", eta0)
        .with("residual", residual)
        .with("slack", ratio(lhs, rhs));
    if !drift.applicable {
        r = r.not_applicable("classifier-drift precondition failed");
    }
    Ok(r)
}

/// Worst case over all `(i, k)` of
/// `P_{yᵢ,k}/c² ≤ P_{i,k} ≤ c²·P_{yᵢ,k}`, `c = exp(γ‖xᵢ − w_{yᵢ}‖)`,
/// `γ = maxₖ‖wₖ‖`, checked in the log domain. Instance rows are
/// `softmax(xᵢᵀW)`, class rows `softmax(w_yᵀW)`.
pub fn verify_anchor_sandwich(x: &Matrix<f64>, w: &Matrix<f64>, labels: &[usize]) -> TheoryResult<BoundReport> {
    let (n, d) = x.shape();
    let c = w.cols();
    if w.rows() != d {
        return Err(TheoryError::Invalid(format!("features have d = {d}, classifier has {} rows", w.rows())));
    }
    if labels.len() != n {
        return Err(TheoryError::Invalid(format!("{} labels for {n} examples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(TheoryError::Invalid(format!("label {bad} out of range for {c} classes")));
    }
    let log_inst = log_softmax_rows(&x.matmul(w)?, 1.0)?;
    let log_class = log_softmax_rows(&w.t_matmul(w)?, 1.0)?;
    let gamma = (0..c).map(|k| norm(&w.col(k))).fold(0.0, f64::max);

    let (mut worst, mut lhs, mut rhs, mut worst_dist) = (-1.0, 0.0, 0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let dist = x.row(i).iter().enumerate().map(|(r, v)| (v - w[(r, y)]).powi(2)).sum::<f64>().sqrt();
        let bound = 2.0 * gamma * dist;
        for k in 0..c {
            let gap = (log_inst[(i, k)] - log_class[(y, k)]).abs();
            let rt = ratio(gap, bound);
            if rt > worst {
                (worst, lhs, rhs, worst_dist) = (rt, gap, bound, dist);
            }
        }
    }
    Ok(BoundReport::new("anchor_sandwich", lhs, rhs)
        .with("gamma", gamma)
        .with("c", (gamma * worst_dist).exp())
        .with("slack", worst.max(0.0))
        .note("class rows use unnormalized classifier columns at temperature 1"))
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}
