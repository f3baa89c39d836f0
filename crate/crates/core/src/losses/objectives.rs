//! Model-level objectives: each runs the adapter, the classifier and (when
//! needed) the projection head, then back-propagates into every group.

use crate::model::{HeadCache, ModelState};
use crate::ndcore::{argmax, l2_normalize_cols, l2_normalize_rows, log_softmax_rows, softmax_rows, Matrix, NdError};
use crate::Scalar;

use super::classification::{ce_loss, smoothed_targets, soft_target_ce, LogitLoss, SmoothingMode};
use super::distributions::{instance_text_distribution, TextReference};
use super::{check_labels, Grads, Hyperparams, LossError, LossKind, LossOutput, LossResult};

/// Source of the instance-level text distribution `P′` in the TeS objective.
///
/// `P′` is always treated as a constant target. `Live` recomputes it from the
/// current projection head; `Fixed` supplies it (e.g. frozen at a base point
/// for finite-difference checks).
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a, T> {
    Live,
    Fixed(&'a Matrix<T>),
}

struct VisionPass<T> {
    features: Matrix<T>,
    logits: Matrix<T>,
}

fn vision_pass<T: Scalar>(model: &ModelState<T>, x_raw: &Matrix<T>, labels: &[usize]) -> LossResult<VisionPass<T>> {
    let features = model.adapter.forward(x_raw)?;
    let logits = model.classifier.logits(&features)?;
    check_labels(labels, logits.rows(), logits.cols())?;
    Ok(VisionPass { features, logits })
}

/// Fills classifier and adapter gradients from `dL/dlogits` plus any extra
/// `dL/dX` contribution.
fn backprop_vision<T: Scalar>(
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    pass: &VisionPass<T>,
    dlogits: &Matrix<T>,
    extra_dx: Option<&Matrix<T>>,
    grads: &mut Grads<T>,
) -> LossResult<()> {
    let dw = pass.features.t_matmul(dlogits)?;
    for (g, d) in grads.classifier.iter_mut().zip(dw.as_slice()) {
        *g += *d;
    }
    let mut dx = dlogits.matmul_t(&model.classifier.weights)?;
    if let Some(extra) = extra_dx {
        dx.axpy(T::one(), extra)?;
    }
    let da = model.adapter.backward(x_raw, &dx)?;
    for (g, d) in grads.adapter.iter_mut().zip(&da) {
        *g += *d;
    }
    Ok(())
}

struct TextBranch<T> {
    loss: LogitLoss<T>,
    cache: HeadCache<T>,
    head_grad: Vec<T>,
    dx: Matrix<T>,
}

/// `ℓ_T` on already adapted features, gradients scaled by `weight`.
fn text_branch<T: Scalar>(
    model: &ModelState<T>,
    features: &Matrix<T>,
    labels: &[usize],
    text: &TextReference<T>,
    tau_text: T,
    weight: T,
) -> LossResult<TextBranch<T>> {
    if text.num_classes() != model.classifier.num_classes() || text.text_dim() != model.head.output_dim() {
        return Err(LossError::Nd(NdError::Shape {
            op: "text_branch",
            left: (model.head.output_dim(), model.classifier.num_classes()),
            right: text.z().shape(),
        }));
    }
    let cache = model.head.forward_cached(features)?;
    let inv_tau = T::one() / tau_text;
    let logits = cache.output.matmul(text.z_tilde())?.scale(inv_tau);
    let loss = ce_loss(&logits, labels)?;
    let d_proj = loss.dlogits.matmul_t(text.z_tilde())?.scale(weight * inv_tau);
    let (head_grad, dx) = model.head.backward(features, &cache, &d_proj)?;
    Ok(TextBranch { loss, cache, head_grad, dx })
}

/// Cross entropy of the projected features against the fixed text
/// classifier, `mean −log softmax(h′(xᵢ)ᵀ z̃ / τ′)[yᵢ]`.
///
/// Head gradients are always filled; adapter gradients only when
/// `hp.propagate_lt_to_adapter` is set.
pub fn text_projection_loss<T: Scalar>(
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    labels: &[usize],
    text: &TextReference<T>,
    hp: &Hyperparams,
) -> LossResult<LossOutput<T>> {
    hp.validate()?;
    let features = model.adapter.forward(x_raw)?;
    check_labels(labels, features.rows(), model.classifier.num_classes())?;
    let branch = text_branch(model, &features, labels, text, T::of(hp.tau_text), T::one())?;
    let mut grads = Grads::zeros_like(model);
    grads.head = branch.head_grad;
    if hp.propagate_lt_to_adapter {
        grads.adapter = model.adapter.backward(x_raw, &branch.dx)?;
    }
    Ok(LossOutput { value: branch.loss.value, grads, per_example: Some(branch.loss.per_example) })
}

fn logit_objective<T: Scalar>(
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    pass: &VisionPass<T>,
    loss: LogitLoss<T>,
) -> LossResult<LossOutput<T>> {
    let mut grads = Grads::zeros_like(model);
    backprop_vision(model, x_raw, pass, &loss.dlogits, None, &mut grads)?;
    Ok(LossOutput { value: loss.value, grads, per_example: Some(loss.per_example) })
}

/// CE plus `reg_lambda · ‖M·W − Z‖²_F`, with `M` the model's align map.
pub fn tes_m_objective<T: Scalar>(
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    labels: &[usize],
    z: &Matrix<T>,
    reg_lambda: T,
) -> LossResult<LossOutput<T>> {
    let pass = vision_pass(model, x_raw, labels)?;
    let mut out = logit_objective(model, x_raw, &pass, ce_loss(&pass.logits, labels)?)?;
    let w = &model.classifier.weights;
    let residual = model.align.apply(w)?.sub(z)?;
    let sq: T = residual.as_slice().iter().map(|&r| r * r).sum();
    out.value += reg_lambda * sq;
    let two_lambda = reg_lambda + reg_lambda;
    let dw = model.align.weights.t_matmul(&residual)?;
    for (g, d) in out.grads.classifier.iter_mut().zip(dw.as_slice()) {
        *g += two_lambda * *d;
    }
    let dm = residual.matmul_t(w)?;
    out.grads.align = dm.as_slice().iter().map(|&d| two_lambda * d).collect();
    Ok(out)
}

/// Class-level cross entropy `−Σⱼ Σₖ P′ⱼₖ log Pⱼₖ`, with `P` the softmax of
/// normalized vision proxies `w̃ⱼᵀw̃ₖ / τ`. Returns the value and `dR/dW`.
pub fn class_level_regularizer<T: Scalar>(
    weights: &Matrix<T>,
    text_class_dist: &Matrix<T>,
    tau_vision: T,
) -> LossResult<(T, Matrix<T>)> {
    let c = weights.cols();
    if text_class_dist.shape() != (c, c) {
        return Err(LossError::Nd(NdError::Shape {
            op: "class_level_regularizer",
            left: (c, c),
            right: text_class_dist.shape(),
        }));
    }
    let unit = l2_normalize_cols(weights)?;
    let sim = unit.t_matmul(&unit)?;
    let log_p = log_softmax_rows(&sim, tau_vision)?;
    let mut value = T::zero();
    let mut g = Matrix::zeros(c, c);
    for j in 0..c {
        let target = text_class_dist.row(j);
        let mass: T = target.iter().copied().sum();
        for k in 0..c {
            value -= target[k] * log_p[(j, k)];
            g[(j, k)] = (log_p[(j, k)].exp() * mass - target[k]) / tau_vision;
        }
    }
    // S = W̃ᵀW̃  ⇒  dR/dW̃ = W̃ (G + Gᵀ)
    let sym = g.add(&g.transpose())?;
    let d_unit = unit.matmul(&sym)?;
    let mut dw = Matrix::zeros(weights.rows(), c);
    for k in 0..c {
        let col_norm = crate::ndcore::norm(&weights.col(k));
        let proj: T = (0..weights.rows()).map(|r| unit[(r, k)] * d_unit[(r, k)]).sum();
        for r in 0..weights.rows() {
            dw[(r, k)] = (d_unit[(r, k)] - unit[(r, k)] * proj) / col_norm;
        }
    }
    Ok((value, dw))
}

/// CE plus `reg_lambda` × the class-level regularizer against the cached text `P′`.
pub fn tes_c_objective<T: Scalar>(
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    labels: &[usize],
    text: &TextReference<T>,
    hp: &Hyperparams,
) -> LossResult<LossOutput<T>> {
    hp.validate()?;
    if model.classifier.num_classes() < 2 {
        return Err(LossError::InvalidHyperparam("class-level regularizer needs at least 2 classes".into()));
    }
    let pass = vision_pass(model, x_raw, labels)?;
    let mut out = logit_objective(model, x_raw, &pass, ce_loss(&pass.logits, labels)?)?;
    let lambda = T::of(hp.reg_lambda);
    if hp.reg_lambda > 0.0 {
        let (reg, dw) = class_level_regularizer(&model.classifier.weights, text.class_dist(), T::of(hp.tau_vision))?;
        out.value += lambda * reg;
        for (g, d) in out.grads.classifier.iter_mut().zip(dw.as_slice()) {
            *g += lambda * *d;
        }
    }
    Ok(out)
}

/// Full TeS objective:
/// `(1−λ_V)·CE − (λ_V/n) Σᵢ Σₖ P′ᵢₖ log Pᵢₖ + (λ_T/n) Σᵢ ℓ_T(xᵢ, yᵢ)`.
///
/// `P′` enters as a constant: the head only learns through `ℓ_T`.
pub fn tes_objective<T: Scalar>(
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    labels: &[usize],
    text: &TextReference<T>,
    hp: &Hyperparams,
    teacher: Teacher<'_, T>,
) -> LossResult<LossOutput<T>> {
    hp.validate()?;
    let pass = vision_pass(model, x_raw, labels)?;
    let lambda_v = T::of(hp.lambda_v);
    let lambda_t = T::of(hp.lambda_t);
    let tau_text = T::of(hp.tau_text);

    let needs_head = hp.lambda_t > 0.0 || (hp.lambda_v > 0.0 && matches!(teacher, Teacher::Live));
    let branch =
        if needs_head { Some(text_branch(model, &pass.features, labels, text, tau_text, lambda_t)?) } else { None };

    let vision = if hp.lambda_v == 0.0 {
        ce_loss(&pass.logits, labels)?
    } else {
        let live;
        let p_text = match teacher {
            Teacher::Fixed(p) => p,
            Teacher::Live => {
                let b = branch.as_ref().expect("head evaluated for live teacher");
                live = instance_text_distribution(&b.cache.output, text.z_tilde(), tau_text)?;
                &live
            }
        };
        if p_text.shape() != pass.logits.shape() {
            return Err(LossError::Nd(NdError::Shape {
                op: "tes_objective teacher",
                left: pass.logits.shape(),
                right: p_text.shape(),
            }));
        }
        let keep = T::one() - lambda_v;
        let mut targets = p_text.scale(lambda_v);
        for (i, &y) in labels.iter().enumerate() {
            targets[(i, y)] += keep;
        }
        soft_target_ce(&pass.logits, &targets)?
    };

    let mut grads = Grads::zeros_like(model);
    let mut value = vision.value;
    let mut per_example = vision.per_example.clone();
    let extra_dx = match &branch {
        Some(b) if hp.lambda_t > 0.0 => {
            value += lambda_t * b.loss.value;
            for (p, l) in per_example.iter_mut().zip(&b.loss.per_example) {
                *p += lambda_t * *l;
            }
            grads.head = b.head_grad.clone();
            hp.propagate_lt_to_adapter.then_some(&b.dx)
        }
        _ => None,
    };
    backprop_vision(model, x_raw, &pass, &vision.dlogits, extra_dx, &mut grads)?;
    Ok(LossOutput { value, grads, per_example: Some(per_example) })
}

/// Dispatches on [`LossKind`]. `text` is required for every kind except CE and LS.
pub fn objective<T: Scalar>(
    kind: LossKind,
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    labels: &[usize],
    text: Option<&TextReference<T>>,
    hp: &Hyperparams,
) -> LossResult<LossOutput<T>> {
    hp.validate()?;
    let need_text = || text.ok_or(LossError::MissingTextReference(kind.name()));
    match kind {
        LossKind::Ce => {
            let pass = vision_pass(model, x_raw, labels)?;
            let loss = ce_loss(&pass.logits, labels)?;
            logit_objective(model, x_raw, &pass, loss)
        }
        LossKind::Ls | LossKind::Tls => {
            let pass = vision_pass(model, x_raw, labels)?;
            let loss = if hp.ls_epsilon == 0.0 {
                ce_loss(&pass.logits, labels)?
            } else {
                let (mode, dist) = if kind == LossKind::Tls {
                    (SmoothingMode::Text, Some(need_text()?.class_dist()))
                } else {
                    (SmoothingMode::Uniform, None)
                };
                let targets = smoothed_targets(labels, pass.logits.cols(), T::of(hp.ls_epsilon), mode, dist)?;
                soft_target_ce(&pass.logits, &targets)?
            };
            logit_objective(model, x_raw, &pass, loss)
        }
        LossKind::TesM => tes_m_objective(model, x_raw, labels, need_text()?.z(), T::of(hp.reg_lambda)),
        LossKind::TesC => tes_c_objective(model, x_raw, labels, need_text()?, hp),
        LossKind::Tes => tes_objective(model, x_raw, labels, need_text()?, hp, Teacher::Live),
    }
}

/// Nearest text proxy by cosine similarity; ties go to the lowest class index.
pub fn zero_shot_predict<T: Scalar>(x_img: &Matrix<T>, z: &Matrix<T>) -> LossResult<Vec<usize>> {
    if x_img.cols() != z.rows() {
        return Err(LossError::Nd(NdError::Shape { op: "zero_shot_predict", left: x_img.shape(), right: z.shape() }));
    }
    let x = l2_normalize_rows(x_img)?;
    let z = l2_normalize_cols(z)?;
    let sim = x.matmul(&z)?;
    Ok((0..sim.rows()).map(|r| argmax(sim.row(r))).collect())
}

/// Class posterior of the text head, `softmax(h′(x)ᵀ z̃ / τ′)`.
pub fn text_head_distribution<T: Scalar>(
    model: &ModelState<T>,
    x_raw: &Matrix<T>,
    text: &TextReference<T>,
) -> LossResult<Matrix<T>> {
    let proj = model.head.forward(&model.adapter.forward(x_raw)?)?;
    Ok(softmax_rows(&proj.matmul(text.z_tilde())?, text.tau_text())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::{random_problem, GradCheckConfig, GradCheckProblem};
    use crate::model::ProjectionHead;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn problem(seed: u64) -> GradCheckProblem {
        random_problem(&GradCheckConfig::default(), seed).unwrap()
    }

    fn run(kind: LossKind, p: &GradCheckProblem, hp: &Hyperparams) -> LossOutput<f64> {
        objective(kind, &p.model, &p.x_raw, &p.labels, Some(&p.text), hp).unwrap()
    }

    #[test]
    fn reductions_to_ce() {
        for seed in 0..5 {
            let p = problem(seed);
            let ce = run(LossKind::Ce, &p, &p.hp);
            let cases = [
                (LossKind::Tes, Hyperparams { lambda_v: 0.0, lambda_t: 0.0, ..p.hp }),
                (LossKind::Ls, Hyperparams { ls_epsilon: 0.0, ..p.hp }),
                (LossKind::Tls, Hyperparams { ls_epsilon: 0.0, ..p.hp }),
                (LossKind::TesM, Hyperparams { reg_lambda: 0.0, ..p.hp }),
                (LossKind::TesC, Hyperparams { reg_lambda: 0.0, ..p.hp }),
            ];
            for (kind, hp) in cases {
                let out = run(kind, &p, &hp);
                assert!((out.value - ce.value).abs() <= 1e-12, "{}", kind.name());
                for (a, b) in out.grads.flatten().iter().zip(ce.grads.flatten()) {
                    assert!((a - b).abs() <= 1e-12, "{}", kind.name());
                }
            }
        }
    }

    #[test]
    fn proxy_match_vanishes_at_target() {
        let p = problem(1);
        let z = p.model.align.apply(&p.model.classifier.weights).unwrap();
        let out = tes_m_objective(&p.model, &p.x_raw, &p.labels, &z, 0.7).unwrap();
        let ce = run(LossKind::Ce, &p, &p.hp);
        assert!((out.value - ce.value).abs() < 1e-15);
        assert!(out.grads.align.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn class_regularizer_is_kl_plus_entropy() {
        let mut rng = rng_from_seed(77);
        for _ in 0..100 {
            let (d, c) = (rng.random_range(2..9), rng.random_range(2..7));
            let w = Matrix::from_fn(d, c, |_, _| rng.random_range(-2.0..2.0));
            let z = Matrix::from_fn(d, c, |_, _| rng.random_range(-2.0..2.0));
            let tau = rng.random_range(0.2..2.0);
            let text = TextReference::new(z, 0.5).unwrap();
            let (value, _) = class_level_regularizer(&w, text.class_dist(), tau).unwrap();

            // direct oracle: cosine similarities, softmax by explicit sums
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
            };
            let p_text = text.class_dist();
            let mut kl_plus_h = 0.0;
            for j in 0..c {
                let s: Vec<f64> = (0..c).map(|k| (cos(&w.col(j), &w.col(k)) / tau).exp()).collect();
                let total: f64 = s.iter().sum();
                for k in 0..c {
                    let q = p_text[(j, k)];
                    let pv = s[k] / total;
                    kl_plus_h += q * (q / pv).ln() - q * q.ln();
                }
            }
            assert!((value - kl_plus_h).abs() <= 1e-10, "{value} vs {kl_plus_h}");
        }
    }

    #[test]
    fn tes_is_affine_in_lambda_v() {
        let p = problem(3);
        let value = |lv: f64| {
            let hp = Hyperparams { lambda_v: lv, ..p.hp };
            run(LossKind::Tes, &p, &hp).value
        };
        let (v0, v1) = (value(0.0), value(1.0));
        for lv in [0.25, 0.5] {
            assert!((value(lv) - ((1.0 - lv) * v0 + lv * v1)).abs() <= 1e-10);
        }
    }

    #[test]
    fn tes_endpoint_is_distillation_plus_text_loss() {
        let p = problem(4);
        let hp = Hyperparams { lambda_v: 1.0, ..p.hp };
        let out = run(LossKind::Tes, &p, &hp);
        let x = p.model.adapter.forward(&p.x_raw).unwrap();
        let teacher =
            instance_text_distribution(&p.model.head.forward(&x).unwrap(), p.text.z_tilde(), hp.tau_text).unwrap();
        let log_p = log_softmax_rows(&p.model.classifier.logits(&x).unwrap(), 1.0).unwrap();
        let n = p.labels.len() as f64;
        let distill: f64 = -teacher.as_slice().iter().zip(log_p.as_slice()).map(|(t, l)| t * l).sum::<f64>() / n;
        let lt = text_projection_loss(&p.model, &p.x_raw, &p.labels, &p.text, &hp).unwrap().value;
        assert!((out.value - (distill + hp.lambda_t * lt)).abs() < 1e-12);
    }

    #[test]
    fn text_loss_examples() {
        // identical proxy columns: uniform text logits
        let p = problem(5);
        let z = Matrix::from_fn(p.text.text_dim(), p.text.num_classes(), |r, _| r as f64 + 1.0);
        let text = TextReference::new(z, 0.03).unwrap();
        let out = text_projection_loss(&p.model, &p.x_raw, &p.labels, &text, &p.hp).unwrap();
        assert!((out.value - (p.text.num_classes() as f64).ln()).abs() < 1e-12);

        // head maps e_y onto z̃_y exactly, orthonormal proxies, C = 2
        let mut m = p.model.clone();
        m.adapter = crate::model::FeatureAdapter::identity(2);
        m.classifier = crate::model::VisionClassifier::zeros(2, 2);
        m.head = ProjectionHead::new(Matrix::identity(2), vec![0.0; 2], Matrix::identity(2), vec![0.0; 2]).unwrap();
        let text = TextReference::new(Matrix::identity(2), 0.03).unwrap();
        let x = Matrix::identity(2);
        let out = text_projection_loss(&m, &x, &[0, 1], &text, &p.hp).unwrap();
        let want = (1.0 + (-1.0f64 / 0.03).exp()).ln();
        assert!((out.value - want).abs() < 1e-18);
        assert!(out.value < 1e-13);
    }

    #[test]
    fn adapter_flag_controls_text_path() {
        let p = problem(6);
        let off = Hyperparams { propagate_lt_to_adapter: false, ..p.hp };
        let lt = text_projection_loss(&p.model, &p.x_raw, &p.labels, &p.text, &off).unwrap();
        assert!(lt.grads.adapter.iter().all(|v| *v == 0.0));
        assert!(lt.grads.head.iter().any(|v| *v != 0.0));

        let with_lt = run(LossKind::Tes, &p, &off);
        let vision_only = run(LossKind::Tes, &p, &Hyperparams { lambda_t: 0.0, ..off });
        assert_eq!(with_lt.grads.adapter, vision_only.grads.adapter);
        assert_ne!(with_lt.grads.head, vision_only.grads.head);
        let on = run(LossKind::Tes, &p, &p.hp);
        assert_ne!(on.grads.adapter, with_lt.grads.adapter);
    }

    #[test]
    fn text_required() {
        let p = problem(7);
        for kind in [LossKind::Tls, LossKind::TesM, LossKind::TesC, LossKind::Tes] {
            assert!(matches!(
                objective(kind, &p.model, &p.x_raw, &p.labels, None, &p.hp),
                Err(LossError::MissingTextReference(_))
            ));
        }
        assert!(objective(LossKind::Ls, &p.model, &p.x_raw, &p.labels, None, &p.hp).is_ok());
    }

    #[test]
    fn zero_shot_examples() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 0.1], vec![1.0, 1.0]]).unwrap();
        assert_eq!(zero_shot_predict(&x, &z).unwrap(), vec![0, 1, 2]);
        // equidistant from proxies 0 and 1
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(zero_shot_predict(&x, &z).unwrap(), vec![0]);

        let mut rng = rng_from_seed(8);
        let z = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let x = Matrix::from_fn(50, 4, |_, _| rng.random_range(-1.0..1.0));
        let got = zero_shot_predict(&x, &z).unwrap();
        for i in 0..50 {
            let xi = x.row(i);
            let nx = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..6 {
                let zk = z.col(k);
                let nz = zk.iter().map(|v| v * v).sum::<f64>().sqrt();
                let c = xi.iter().zip(&zk).map(|(a, b)| a * b).sum::<f64>() / (nx * nz);
                if c > best.1 {
                    best = (k, c);
                }
            }
            assert_eq!(got[i], best.0);
        }
    }
}
