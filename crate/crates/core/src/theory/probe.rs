use crate::losses::ce_loss;
use crate::ndcore::{softmax_rows, Matrix};

use super::{symmetric_eigenvalues, TheoryError, TheoryResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    /// Stop once `‖∇‖_F ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point (d × C); zeros when absent.
    pub init: Option<Matrix<f64>>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200_000, init: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSolution {
    pub weights: Matrix<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// `CE(XW) + μ‖W‖²_F` and its gradient in `W`.
pub fn probe_objective(
    x: &Matrix<f64>,
    labels: &[usize],
    w: &Matrix<f64>,
    mu: f64,
) -> TheoryResult<(f64, Matrix<f64>)> {
    let out = ce_loss(&x.matmul(w)?, labels)?;
    let mut grad = x.t_matmul(&out.dlogits)?;
    grad.axpy(2.0 * mu, w)?;
    let reg = mu * w.frobenius_norm().powi(2);
    Ok((out.value + reg, grad))
}

/// Minimizer of `CE(XW) + μ‖W‖²_F` by full-batch accelerated gradient
/// descent with the constant momentum of a `2μ`-strongly convex,
/// `0.5·λ_max(XᵀX/n) + 2μ`-smooth objective.
pub fn solve_linear_probe(
    x: &Matrix<f64>,
    labels: &[usize],
    classes: usize,
    mu: f64,
    opts: &ProbeOptions,
) -> TheoryResult<ProbeSolution> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(TheoryError::Invalid(format!("mu must be > 0, got {mu}")));
    }
    if x.rows() == 0 || classes < 2 {
        return Err(TheoryError::Invalid("need at least one example and two classes".into()));
    }
    let d = x.cols();
    let gram = x.t_matmul(x)?.scale(1.0 / x.rows() as f64);
    let top = symmetric_eigenvalues(&gram)?.last().copied().unwrap_or(0.0).max(0.0);
    let smooth = 0.5 * top + 2.0 * mu;
    let strong = 2.0 * mu;
    let beta = (smooth.sqrt() - strong.sqrt()) / (smooth.sqrt() + strong.sqrt());

    let mut w = match &opts.init {
        Some(w0) if w0.shape() == (d, classes) => w0.clone(),
        Some(w0) => {
            return Err(TheoryError::Invalid(format!("init is {:?}, expected {:?}", w0.shape(), (d, classes))));
        }
        None => Matrix::zeros(d, classes),
    };
    let mut prev = w.clone();
    let mut grad_norm = f64::INFINITY;
    for it in 0..=opts.max_iter {
        // look-ahead point
        let mut y = w.clone();
        y.axpy(beta, &w.sub(&prev)?)?;
        let (value, g) = probe_objective(x, labels, &y, mu)?;
        grad_norm = g.frobenius_norm();
        if grad_norm <= opts.tol {
            return Ok(ProbeSolution { weights: y, objective: value, grad_norm, iterations: it });
        }
        if !grad_norm.is_finite() {
            break;
        }
        prev = w;
        w = y;
        w.axpy(-1.0 / smooth, &g)?;
    }
    Err(TheoryError::NotConverged { iterations: opts.max_iter, grad_norm })
}

/// Hessian of the mean cross entropy in `W` at fixed features, indexed
/// like the row-major layout of `W` (`r·C + k`):
/// `(1/n) Σᵢ xᵢᵣ xᵢₛ (pᵢₖ δₖₗ − pᵢₖ pᵢₗ)`.
pub fn ce_hessian(x: &Matrix<f64>, w: &Matrix<f64>) -> TheoryResult<Matrix<f64>> {
    let (n, d) = x.shape();
    let c = w.cols();
    let p = softmax_rows(&x.matmul(w)?, 1.0)?;
    let dim = d * c;
    let mut h = Matrix::zeros(dim, dim);
    let inv_n = 1.0 / n.max(1) as f64;
    let mut a = vec![0.0; c * c];
    for i in 0..n {
        let xi = x.row(i);
        let pi = p.row(i);
        for k in 0..c {
            for l in 0..c {
                a[k * c + l] = if k == l { pi[k] } else { 0.0 } - pi[k] * pi[l];
            }
        }
        for r in 0..d {
            for s in 0..=r {
                let xx = xi[r] * xi[s] * inv_n;
                if xx == 0.0 {
                    continue;
                }
                for k in 0..c {
                    for l in 0..c {
                        h[(r * c + k, s * c + l)] += xx * a[k * c + l];
                    }
                }
            }
        }
    }
    for row in 0..dim {
        for col in (row + 1)..dim {
            h[(row, col)] = h[(col, row)];
        }
    }
    Ok(h)
}
