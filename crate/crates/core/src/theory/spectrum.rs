use nalgebra::DMatrix;

use crate::ndcore::{dot, norm, Matrix};
use crate::rng::{gaussian, rng_from_seed};

use super::{TheoryError, TheoryResult};

fn check_symmetric(a: &Matrix<f64>) -> TheoryResult<()> {
    let (r, c) = a.shape();
    if r != c || r == 0 {
        return Err(TheoryError::Invalid(format!("need a non-empty square matrix, got {r} x {c}")));
    }
    for i in 0..r {
        for j in 0..i {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return Err(TheoryError::Invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix, ascending (dense solver).
pub fn symmetric_eigenvalues(a: &Matrix<f64>) -> TheoryResult<Vec<f64>> {
    check_symmetric(a)?;
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
    let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Smallest eigenvalue of a symmetric matrix by power iteration on
/// `sI − A`, where `s` is the Gershgorin upper bound on the spectrum.
/// Stops when the Rayleigh quotient changes by less than `tol` (relative).
pub fn min_eigenvalue_power(a: &Matrix<f64>, max_iter: usize, tol: f64, seed: u64) -> TheoryResult<f64> {
    check_symmetric(a)?;
    let n = a.rows();
    let shift = (0..n).map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let apply = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| shift * v[i] - dot(a.row(i), v)).collect() };
    let mut rng = rng_from_seed(seed);
    let mut v: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut rho = f64::NAN;
    for _ in 0..max_iter {
        let bv = apply(&v);
        let next = dot(&v, &bv);
        let nb = norm(&bv);
        if nb == 0.0 {
            // every eigenvalue equals the shift
            return Ok(shift);
        }
        v = bv.into_iter().map(|x| x / nb).collect();
        if (next - rho).abs() <= tol * next.abs().max(1.0) {
            return Ok(shift - next);
        }
        rho = next;
    }
    Err(TheoryError::Invalid(format!("power iteration did not settle in {max_iter} iterations")))
}
