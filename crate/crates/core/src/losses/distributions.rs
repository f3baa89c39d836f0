//! Class-level and instance-level distributions over classes.

use crate::ndcore::{l2_normalize_cols, norm, softmax_rows, Matrix, NdError};
use crate::Scalar;

use super::{LossError, LossResult};

/// Tolerance for "already unit-normalized" input checks.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Row `j` is the softmax over `k` of `w̃ⱼᵀw̃ₖ / temperature`, where `w̃` are
/// the unit-normalized columns of `proxies` (d × C). Returns C × C.
pub fn class_distributions<T: Scalar>(proxies: &Matrix<T>, temperature: T) -> LossResult<Matrix<T>> {
    let unit = l2_normalize_cols(proxies)?;
    let sim = unit.t_matmul(&unit)?;
    Ok(softmax_rows(&sim, temperature)?)
}

/// `softmax(xᵢᵀ W)` per example, no temperature and no normalization.
pub fn instance_vision_distribution<T: Scalar>(x: &Matrix<T>, weights: &Matrix<T>) -> LossResult<Matrix<T>> {
    Ok(softmax_rows(&x.matmul(weights)?, T::one())?)
}

/// `softmax(x′ᵢᵀ z̃ₖ / τ′)` per example. Both inputs must already be unit-norm.
pub fn instance_text_distribution<T: Scalar>(
    projected: &Matrix<T>,
    z_tilde: &Matrix<T>,
    tau_text: T,
) -> LossResult<Matrix<T>> {
    check_unit_rows(projected, "projected features")?;
    check_unit_rows(&z_tilde.transpose(), "text proxies")?;
    Ok(softmax_rows(&projected.matmul(z_tilde)?, tau_text)?)
}

pub(crate) fn check_unit_rows<T: Scalar>(m: &Matrix<T>, what: &'static str) -> LossResult<()> {
    for r in 0..m.rows() {
        let n = norm(m.row(r)).as_f64();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NotNormalized { what, index: r, norm: n });
        }
    }
    Ok(())
}

/// Fixed text-side reference: raw proxies `Z`, their normalized columns
/// `Z̃`, and the class-level text distribution `P′` (computed once).
#[derive(Debug, Clone, PartialEq)]
pub struct TextReference<T> {
    z: Matrix<T>,
    z_tilde: Matrix<T>,
    class_dist: Matrix<T>,
    tau_text: T,
}

impl<T: Scalar> TextReference<T> {
    /// `z` is d_z × C, one proxy column per class.
    pub fn new(z: Matrix<T>, tau_text: T) -> LossResult<Self> {
        if z.cols() < 1 {
            return Err(LossError::Nd(NdError::Parameter("text proxies need at least one class".into())));
        }
        let z_tilde = l2_normalize_cols(&z)?;
        let class_dist = softmax_rows(&z_tilde.t_matmul(&z_tilde)?, tau_text)?;
        Ok(Self { z, z_tilde, class_dist, tau_text })
    }

    pub fn z(&self) -> &Matrix<T> {
        &self.z
    }

    pub fn z_tilde(&self) -> &Matrix<T> {
        &self.z_tilde
    }

    /// Cached class-level `P′` (C × C).
    pub fn class_dist(&self) -> &Matrix<T> {
        &self.class_dist
    }

    pub fn tau_text(&self) -> T {
        self.tau_text
    }

    pub fn num_classes(&self) -> usize {
        self.z.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.z.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn orthonormal_pair_rows() {
        let p = class_distributions(&Matrix::<f64>::identity(2), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[(0, 0)] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[(0, 1)] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.731).abs() < 1e-3 && (p[(1, 1)] - 0.731).abs() < 1e-3);
    }

    #[test]
    fn identical_proxies_give_uniform_rows() {
        let z = Matrix::from_fn(3, 4, |r, _| (r + 1) as f64);
        let p = class_distributions(&z, 0.3).unwrap();
        for v in p.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn small_temperature_is_near_one_hot() {
        let z = Matrix::from_rows(&[vec![1.0, 0.6, 0.0], vec![0.0, 0.8, 1.0]]).unwrap();
        let p = class_distributions(&z, 0.005).unwrap();
        for j in 0..3 {
            assert!(p[(j, j)] > 1.0 - 1e-9);
        }
    }

    #[test]
    fn degenerate_proxy_column() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(class_distributions(&z, 1.0), Err(LossError::Nd(NdError::DegenerateRow { index: 1, .. }))));
    }

    #[test]
    fn vision_instance_examples() {
        let x = Matrix::from_rows(&[vec![0.3, -2.0, 1.0]]).unwrap();
        let p = instance_vision_distribution(&x, &Matrix::<f64>::zeros(3, 4)).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));

        // x = w_y with orthonormal proxies: e / (e + C - 1)
        let c = 4;
        let w = Matrix::<f64>::identity(c);
        let x = Matrix::from_rows(&[w.col(2)]).unwrap();
        let p = instance_vision_distribution(&x, &w).unwrap();
        let e = std::f64::consts::E;
        assert!((p[(0, 2)] - e / (e + (c - 1) as f64)).abs() < 1e-15);

        let mut rng = rng_from_seed(3);
        let x = Matrix::from_fn(6, 5, |_, _| rng.random_range(-3.0..3.0));
        let w = Matrix::from_fn(5, 4, |_, _| rng.random_range(-3.0..3.0));
        let p = instance_vision_distribution(&x, &w).unwrap();
        for r in 0..6 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vision_argmax_invariant_to_shared_shift() {
        let mut rng = rng_from_seed(4);
        let x = Matrix::from_fn(20, 5, |_, _| rng.random_range(-2.0..2.0));
        let w = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let shift: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted = Matrix::from_fn(5, 3, |r, c| w[(r, c)] + shift[r]);
        let a = instance_vision_distribution(&x, &w).unwrap();
        let b = instance_vision_distribution(&x, &shifted).unwrap();
        for r in 0..20 {
            assert_eq!(crate::ndcore::argmax(a.row(r)), crate::ndcore::argmax(b.row(r)));
        }
    }

    #[test]
    fn text_instance_examples() {
        // orthonormal proxies (cosine gap 1), x′ = z̃_1
        let reference = TextReference::new(Matrix::<f64>::identity(3), 0.03).unwrap();
        let x = Matrix::from_rows(&[reference.z_tilde().col(1)]).unwrap();
        let p = instance_text_distribution(&x, reference.z_tilde(), 0.03).unwrap();
        assert!(p[(0, 1)] >= 1.0 - 1e-9);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // smaller gaps: mass at j is 1 / (1 + Σ_{k≠j} exp((cos_jk − 1) / τ′))
        let z = Matrix::from_rows(&[vec![1.0, 0.6, 0.0], vec![0.0, 0.8, 1.0]]).unwrap();
        let reference = TextReference::new(z, 0.03).unwrap();
        let x = Matrix::from_rows(&[reference.z_tilde().col(1)]).unwrap();
        let p = instance_text_distribution(&x, reference.z_tilde(), 0.03).unwrap();
        let want = 1.0 / (1.0 + ((0.6f64 - 1.0) / 0.03).exp() + ((0.8f64 - 1.0) / 0.03).exp());
        assert!((p[(0, 1)] - want).abs() < 1e-12);

        let same: Matrix<f64> = Matrix::from_fn(2, 3, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let x = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let p = instance_text_distribution(&x, &same, 0.03).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let not_unit = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(matches!(
            instance_text_distribution(&not_unit, &same, 0.03),
            Err(LossError::NotNormalized { index: 0, .. })
        ));
    }

    #[test]
    fn reference_cache_is_stable() {
        let mut rng = rng_from_seed(9);
        let z = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let a = TextReference::new(z.clone(), 0.03).unwrap();
        let b = TextReference::new(z, 0.03).unwrap();
        assert_eq!(a.class_dist(), b.class_dist());
    }
}
