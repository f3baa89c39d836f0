//! Seeded synthetic embeddings around orthonormal class directions.

use serde::{Deserialize, Serialize};

use crate::ndcore::{dot, norm, Matrix};
use crate::rng::{gaussian, rng_from_seed, TesRng};

use super::{DataError, DataResult, FeatureDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub margin: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { seed: 0, classes: 10, dim: 16, n_per_class: 100, margin: 3.0 }
    }
}

/// `classes` orthonormal columns in `dim` dimensions (Gram-Schmidt on
/// Gaussian draws, redrawn if a draw is nearly dependent).
pub fn orthonormal_proxies(rng: &mut TesRng, dim: usize, classes: usize) -> DataResult<Matrix<f64>> {
    if dim < classes {
        return Err(DataError::Invalid(format!("need dim >= classes, got {dim} < {classes}")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Ok(Matrix::from_fn(dim, classes, |r, k| basis[k][r]))
}

/// `n_per_class` examples per class, `x = margin·p_y + N(0, I)`, class-major
/// order. Returns the dataset and the ground-truth proxies (dim × classes).
pub fn synth_generate(spec: &SynthSpec) -> DataResult<(FeatureDataset<f64>, Matrix<f64>)> {
    if spec.classes < 2 {
        return Err(DataError::Invalid(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if !(spec.margin >= 0.0) || !spec.margin.is_finite() {
        return Err(DataError::Invalid(format!("margin must be >= 0, got {}", spec.margin)));
    }
    let mut rng = rng_from_seed(spec.seed);
    let proxies = orthonormal_proxies(&mut rng, spec.dim, spec.classes)?;
    let n = spec.classes * spec.n_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.n_per_class.max(1)).collect();
    let features =
        Matrix::from_fn(n, spec.dim, |i, r| spec.margin * proxies[(r, labels[i])] + gaussian::<f64>(&mut rng));
    let names = (0..spec.classes).map(|k| format!("class_{k}")).collect();
    Ok((FeatureDataset::new(features, labels, names, "synthetic")?, proxies))
}

/// Noisy copies of class directions: column `k` is `p_k + noise·N(0, I)`.
pub fn noisy_text_proxies(proxies: &Matrix<f64>, noise: f64, seed: u64) -> Matrix<f64> {
    let mut rng = rng_from_seed(seed);
    Matrix::from_fn(proxies.rows(), proxies.cols(), |r, c| proxies[(r, c)] + noise * gaussian::<f64>(&mut rng))
}
