//! Finite-difference checks of every objective over the full flat parameter
//! vector (all groups, adapter included).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{AlignMap, FeatureAdapter, ModelState, ParamGroup, ProjectionHead, VisionClassifier};
use crate::ndcore::{compare_gradients, finite_diff_gradient, GradCheckReport, Matrix, DEFAULT_FD_STEP};
use crate::rng::{derive_seed, gaussian, rng_from_seed};

use super::{
    instance_text_distribution, objective, tes_objective, text_projection_loss, Hyperparams, LossKind, LossOutput,
    LossResult, Teacher, TextReference,
};

/// Per-coordinate spread of text proxies around their shared direction.
const PROXY_SPREAD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckKind {
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
    /// The text-projection loss on its own.
    #[serde(rename = "LT")]
    TextProjection,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] =
        [Self::Ce, Self::Ls, Self::Tls, Self::TesM, Self::TesC, Self::Tes, Self::TextProjection];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "CE",
            Self::Ls => "LS",
            Self::Tls => "TLS",
            Self::TesM => "TES_M",
            Self::TesC => "TES_C",
            Self::Tes => "TES",
            Self::TextProjection => "LT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub points: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub examples: usize,
    pub dim: usize,
    pub classes: usize,
    pub hidden_dim: usize,
    pub text_dim: usize,
    /// Negates the analytic gradient before comparison; every row must then fail.
    pub inject_sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 20,
            seed: 0,
            step: DEFAULT_FD_STEP,
            tolerance: 1e-5,
            examples: 12,
            dim: 5,
            classes: 4,
            hidden_dim: 6,
            text_dim: 3,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub kind: CheckKind,
    pub point: usize,
    pub report: GradCheckReport,
    pub passed: bool,
}

/// One random parameter point with its data.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub model: ModelState<f64>,
    pub x_raw: Matrix<f64>,
    pub labels: Vec<usize>,
    pub text: TextReference<f64>,
    pub hp: Hyperparams,
}

/// Draws every parameter group, the data and the loss weights from `seed`.
///
/// Text proxies share a common direction so that cosine gaps stay comparable
/// to the text temperature and the text softmax does not saturate.
pub fn random_problem(cfg: &GradCheckConfig, seed: u64) -> LossResult<GradCheckProblem> {
    let mut rng = rng_from_seed(seed);
    let (n, d, c, h, dz) = (cfg.examples, cfg.dim, cfg.classes, cfg.hidden_dim, cfg.text_dim);
    let mut g = |s: f64| gaussian::<f64>(&mut rng) * s;
    let adapter = FeatureAdapter::new(
        Matrix::from_fn(d, d, |r, k| if r == k { 1.0 } else { 0.0 } + g(0.2)),
        (0..d).map(|_| g(0.1)).collect(),
    )?;
    let classifier = VisionClassifier::new(Matrix::from_fn(d, c, |_, _| g(0.5)))?;
    let head = ProjectionHead::new(
        Matrix::from_fn(d, h, |_, _| g((2.0 / d as f64).sqrt())),
        (0..h).map(|_| 0.01 + g(0.1)).collect(),
        Matrix::from_fn(h, dz, |_, _| g((2.0 / h as f64).sqrt())),
        (0..dz).map(|_| g(0.1)).collect(),
    )?;
    let align = AlignMap { weights: Matrix::from_fn(dz, d, |_, _| g(0.5)) };
    let x_raw = Matrix::from_fn(n, d, |_, _| g(1.0));
    let common: Vec<f64> = (0..dz).map(|_| g(1.0)).collect();
    let z = Matrix::from_fn(dz, c, |r, _| common[r] + g(PROXY_SPREAD));
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    let hp = Hyperparams {
        lambda_v: rng.random_range(0.05..0.95),
        lambda_t: rng.random_range(0.1..1.5),
        tau_text: 0.03,
        tau_vision: 1.0,
        reg_lambda: rng.random_range(0.1..1.0),
        ls_epsilon: rng.random_range(0.05..0.3),
        propagate_lt_to_adapter: true,
    };
    Ok(GradCheckProblem {
        model: ModelState { adapter, classifier, head, align },
        x_raw,
        labels,
        text: TextReference::new(z, hp.tau_text)?,
        hp,
    })
}

fn flat_params(model: &ModelState<f64>) -> Vec<f64> {
    ParamGroup::ALL.iter().flat_map(|&g| model.params(g)).collect()
}

fn with_flat(model: &ModelState<f64>, flat: &[f64]) -> ModelState<f64> {
    let mut out = model.clone();
    let mut offset = 0;
    for g in ParamGroup::ALL {
        let len = model.num_params(g);
        out.set_params(g, &flat[offset..offset + len]).expect("layout matches");
        offset += len;
    }
    out
}

fn evaluate(
    kind: CheckKind,
    p: &GradCheckProblem,
    model: &ModelState<f64>,
    teacher: Option<&Matrix<f64>>,
) -> LossResult<LossOutput<f64>> {
    let loss = match kind {
        CheckKind::Ce => LossKind::Ce,
        CheckKind::Ls => LossKind::Ls,
        CheckKind::Tls => LossKind::Tls,
        CheckKind::TesM => LossKind::TesM,
        CheckKind::TesC => LossKind::TesC,
        CheckKind::Tes => {
            let t = teacher.map_or(Teacher::Live, Teacher::Fixed);
            return tes_objective(model, &p.x_raw, &p.labels, &p.text, &p.hp, t);
        }
        CheckKind::TextProjection => return text_projection_loss(model, &p.x_raw, &p.labels, &p.text, &p.hp),
    };
    objective(loss, model, &p.x_raw, &p.labels, Some(&p.text), &p.hp)
}

/// Compares the analytic gradient of `kind` at `p` with central differences.
///
/// For TES the teacher distribution is frozen at the base point, matching
/// the constant-target treatment of the analytic gradient.
pub fn check_problem(kind: CheckKind, p: &GradCheckProblem, step: f64, flip: bool) -> LossResult<GradCheckReport> {
    let teacher = match kind {
        CheckKind::Tes => {
            let proj = p.model.head.forward(&p.model.adapter.forward(&p.x_raw)?)?;
            Some(instance_text_distribution(&proj, p.text.z_tilde(), p.hp.tau_text)?)
        }
        _ => None,
    };
    let mut analytic = evaluate(kind, p, &p.model, None)?.grads.flatten();
    if flip {
        analytic.iter_mut().for_each(|v| *v = -*v);
    }
    let base = flat_params(&p.model);
    let f = |x: &[f64]| evaluate(kind, p, &with_flat(&p.model, x), teacher.as_ref()).map_or(f64::NAN, |o| o.value);
    let numeric = finite_diff_gradient(f, &base, step)?;
    Ok(compare_gradients(&analytic, &numeric)?)
}

/// Every kind × `cfg.points` random points; point `i` uses `derive_seed(cfg.seed, i)`.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> LossResult<Vec<GradCheckRow>> {
    let problems: Vec<GradCheckProblem> =
        (0..cfg.points).map(|i| random_problem(cfg, derive_seed(cfg.seed, i as u64))).collect::<LossResult<_>>()?;
    let jobs: Vec<(CheckKind, usize)> =
        CheckKind::ALL.iter().flat_map(|&k| (0..cfg.points).map(move |i| (k, i))).collect();
    jobs.par_iter()
        .map(|&(kind, point)| {
            let report = check_problem(kind, &problems[point], cfg.step, cfg.inject_sign_flip)?;
            Ok(GradCheckRow { kind, point, report, passed: report.passes(cfg.tolerance) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_kinds_pass() {
        let cfg = GradCheckConfig::default();
        let rows = run_gradcheck(&cfg).unwrap();
        assert_eq!(rows.len(), 7 * cfg.points);
        for r in &rows {
            assert!(r.passed, "{} point {}: {:?}", r.kind.name(), r.point, r.report);
            assert!(r.report.analytic_norm > 1e-8);
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        let cfg = GradCheckConfig { points: 3, inject_sign_flip: true, ..Default::default() };
        for r in run_gradcheck(&cfg).unwrap() {
            assert!(!r.passed, "{} point {} passed with a flipped gradient", r.kind.name(), r.point);
        }
    }

    #[test]
    fn live_and_fixed_teacher_agree_at_base_point() {
        let p = random_problem(&GradCheckConfig::default(), 5).unwrap();
        let proj = p.model.head.forward(&p.model.adapter.forward(&p.x_raw).unwrap()).unwrap();
        let fixed = instance_text_distribution(&proj, p.text.z_tilde(), p.hp.tau_text).unwrap();
        let a = tes_objective(&p.model, &p.x_raw, &p.labels, &p.text, &p.hp, Teacher::Live).unwrap();
        let b = tes_objective(&p.model, &p.x_raw, &p.labels, &p.text, &p.hp, Teacher::Fixed(&fixed)).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grads, b.grads);
    }
}
