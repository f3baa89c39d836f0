//! Cross entropy against hard and soft targets, and label smoothing.

use serde::{Deserialize, Serialize};

use crate::ndcore::{log_softmax_rows, Matrix};
use crate::Scalar;

use super::{check_labels, LossError, LossResult};

/// Value, logit gradient and per-example losses of a mean cross entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss<T> {
    pub value: T,
    pub dlogits: Matrix<T>,
    pub per_example: Vec<T>,
}

/// Mean of `−log softmax(logits)[i, yᵢ]`; `dlogits = (softmax − onehot) / n`.
pub fn ce_loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> LossResult<LogitLoss<T>> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let n = logits.rows();
    let log_p = log_softmax_rows(logits, T::one())?;
    let inv_n = T::one() / T::of_usize(n.max(1));
    let mut per_example = Vec::with_capacity(n);
    let mut dlogits = log_p.map(|v| v.exp() * inv_n);
    for (i, &y) in labels.iter().enumerate() {
        per_example.push(-log_p[(i, y)]);
        dlogits[(i, y)] -= inv_n;
    }
    let value = per_example.iter().copied().sum::<T>() * inv_n;
    Ok(LogitLoss { value, dlogits, per_example })
}

/// Mean of `−Σₖ tᵢₖ log softmax(logits)ᵢₖ` for soft targets `t`.
pub fn soft_target_ce<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>) -> LossResult<LogitLoss<T>> {
    if logits.shape() != targets.shape() {
        return Err(LossError::Nd(crate::ndcore::NdError::Shape {
            op: "soft_target_ce",
            left: logits.shape(),
            right: targets.shape(),
        }));
    }
    let n = logits.rows();
    let log_p = log_softmax_rows(logits, T::one())?;
    let inv_n = T::one() / T::of_usize(n.max(1));
    let mut dlogits = Matrix::zeros(n, logits.cols());
    let mut per_example = Vec::with_capacity(n);
    for i in 0..n {
        let t = targets.row(i);
        let lp = log_p.row(i);
        let mass: T = t.iter().copied().sum();
        let mut loss = T::zero();
        for k in 0..t.len() {
            loss -= t[k] * lp[k];
            dlogits[(i, k)] = (lp[k].exp() * mass - t[k]) * inv_n;
        }
        per_example.push(loss);
    }
    let value = per_example.iter().copied().sum::<T>() * inv_n;
    Ok(LogitLoss { value, dlogits, per_example })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// Background mass spread uniformly: the classic label smoothing.
    Uniform,
    /// Background mass follows the text class distribution row of the label.
    Text,
}

/// `(1 − eps)·onehot + eps·background`, background uniform or `P′_{yᵢ,·}`.
pub fn smoothed_targets<T: Scalar>(
    labels: &[usize],
    classes: usize,
    eps: T,
    mode: SmoothingMode,
    text_class_dist: Option<&Matrix<T>>,
) -> LossResult<Matrix<T>> {
    check_labels(labels, labels.len(), classes)?;
    if !(eps >= T::zero() && eps < T::one()) {
        return Err(LossError::InvalidHyperparam(format!("smoothing weight must be in [0, 1), got {eps}")));
    }
    let text = match mode {
        SmoothingMode::Uniform => None,
        SmoothingMode::Text => {
            let p = text_class_dist.ok_or(LossError::MissingTextReference("text-guided smoothing"))?;
            if p.shape() != (classes, classes) {
                return Err(LossError::Nd(crate::ndcore::NdError::Shape {
                    op: "smoothed_targets",
                    left: (classes, classes),
                    right: p.shape(),
                }));
            }
            for r in 0..classes {
                let s: T = p.row(r).iter().copied().sum();
                if (s.as_f64() - 1.0).abs() > 1e-9 || p.row(r).iter().any(|v| *v < T::zero()) {
                    return Err(LossError::NotStochastic { row: r, sum: s.as_f64() });
                }
            }
            Some(p)
        }
    };
    let keep = T::one() - eps;
    let uniform = eps / T::of_usize(classes);
    let mut out = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        let row = out.row_mut(i);
        match text {
            None => row.iter_mut().for_each(|v| *v = uniform),
            Some(p) => row.iter_mut().zip(p.row(y)).for_each(|(v, &q)| *v = eps * q),
        }
        row[y] += keep;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::finite_diff_gradient;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_c() {
        let c = 7;
        let out = ce_loss(&Matrix::<f64>::zeros(3, c), &[0, 3, 6]).unwrap();
        assert!((out.value - (c as f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_decreases_with_margin() {
        let mut last = f64::INFINITY;
        for m in [0.0, 1.0, 3.0, 10.0, 30.0] {
            let logits = Matrix::from_rows(&[vec![m, 0.0, 0.0]]).unwrap();
            let v = ce_loss(&logits, &[0]).unwrap().value;
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn ce_matches_finite_differences() {
        let mut rng = rng_from_seed(12);
        let logits = Matrix::from_fn(4, 3, |_, _| rng.random_range(-2.0..2.0));
        let labels = [0, 2, 1, 1];
        let out = ce_loss(&logits, &labels).unwrap();
        let f = |p: &[f64]| ce_loss(&Matrix::from_vec(4, 3, p.to_vec()).unwrap(), &labels).unwrap().value;
        let num = finite_diff_gradient(f, logits.as_slice(), 1e-5).unwrap();
        for (a, b) in out.dlogits.as_slice().iter().zip(&num) {
            assert!((a - b).abs() < 1e-6);
        }
        // value against a direct evaluation
        let mut direct = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            direct -= (logits[(i, y)].exp() / z).ln();
        }
        assert!((out.value - direct / 4.0).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            ce_loss(&Matrix::<f64>::zeros(1, 2), &[2]),
            Err(LossError::LabelOutOfRange { index: 0, label: 2, classes: 2 })
        ));
    }

    #[test]
    fn smoothing_examples() {
        let t = smoothed_targets::<f64>(&[1, 0], 3, 0.0, SmoothingMode::Uniform, None).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

        let t = smoothed_targets::<f64>(&[3], 10, 0.1, SmoothingMode::Uniform, None).unwrap();
        for k in 0..10 {
            let want = if k == 3 { 0.91 } else { 0.01 };
            assert!((t[(0, k)] - want).abs() < 1e-15);
        }

        let eye = Matrix::<f64>::identity(4);
        let text = smoothed_targets(&[2, 0], 4, 0.3, SmoothingMode::Text, Some(&eye)).unwrap();
        let hard = smoothed_targets::<f64>(&[2, 0], 4, 0.0, SmoothingMode::Uniform, None).unwrap();
        for (a, b) in text.as_slice().iter().zip(hard.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_errors() {
        assert!(matches!(
            smoothed_targets::<f64>(&[0], 2, 0.1, SmoothingMode::Text, None),
            Err(LossError::MissingTextReference(_))
        ));
        let bad = Matrix::from_rows(&[vec![0.5, 0.4], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            smoothed_targets(&[0], 2, 0.1, SmoothingMode::Text, Some(&bad)),
            Err(LossError::NotStochastic { row: 0, .. })
        ));
        assert!(smoothed_targets::<f64>(&[0], 2, 1.0, SmoothingMode::Uniform, None).is_err());
    }

    #[test]
    fn zero_eps_soft_ce_equals_ce() {
        let mut rng = rng_from_seed(2);
        let logits: Matrix<f64> = Matrix::from_fn(5, 4, |_, _| rng.random_range(-3.0..3.0));
        let labels = [0, 1, 2, 3, 0];
        let t = smoothed_targets(&labels, 4, 0.0, SmoothingMode::Uniform, None).unwrap();
        let a = soft_target_ce(&logits, &t).unwrap();
        let b = ce_loss(&logits, &labels).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for (x, y) in a.dlogits.as_slice().iter().zip(b.dlogits.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn smoothed_rows_sum_to_one(
            seed in 0u64..500,
            eps in 0.0f64..0.99,
            classes in 2usize..9,
        ) {
            let mut rng = rng_from_seed(seed);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..classes)).collect();
            let z = Matrix::from_fn(5, classes, |_, _| rng.random_range(-1.0..1.0));
            let p = crate::losses::class_distributions(&z, 0.5).unwrap();
            for mode in [SmoothingMode::Uniform, SmoothingMode::Text] {
                let t = smoothed_targets(&labels, classes, eps, mode, Some(&p)).unwrap();
                for r in 0..t.rows() {
                    prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
