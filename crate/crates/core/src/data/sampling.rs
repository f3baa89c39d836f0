//! Per-class subsampling protocols. Kept rows stay in their original order.

use rand::seq::index::sample;

use crate::rng::{rng_from_seed, TesRng};
use crate::Scalar;

use super::{DataError, DataResult, FeatureDataset};

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// `max(round(fraction·n_c), min(min_per_class, n_c))`, never above `n_c`.
pub fn few_shot_counts(counts: &[usize], fraction: f64, min_per_class: usize) -> Vec<usize> {
    counts.iter().map(|&n| round_half_up(fraction * n as f64).max(min_per_class.min(n)).min(n)).collect()
}

/// `round(n_max · (1/ratio)^(k/(C−1)))`, at least 1.
pub fn long_tail_counts(n_max: usize, classes: usize, ratio: f64) -> Vec<usize> {
    (0..classes)
        .map(|k| {
            if classes == 1 {
                return n_max;
            }
            let frac = k as f64 / (classes - 1) as f64;
            round_half_up(n_max as f64 * ratio.recip().powf(frac)).clamp(1, n_max.max(1))
        })
        .collect()
}

/// Draws `keep[c]` rows of each class without replacement.
fn draw<T: Scalar>(ds: &FeatureDataset<T>, keep: &[usize], rng: &mut TesRng) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(keep.iter().sum());
    for (members, &k) in ds.class_indices().iter().zip(keep) {
        chosen.extend(sample(rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    chosen
}

pub fn few_shot_subsample<T: Scalar>(
    ds: &FeatureDataset<T>,
    fraction: f64,
    min_per_class: usize,
    seed: u64,
) -> DataResult<FeatureDataset<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let keep = few_shot_counts(&ds.class_counts(), fraction, min_per_class);
    let idx = draw(ds, &keep, &mut rng_from_seed(seed));
    Ok(ds.subset(&idx, &ds.split))
}

/// Exponential long-tail profile over class index. Input classes must be balanced.
pub fn long_tail_subsample<T: Scalar>(
    ds: &FeatureDataset<T>,
    imbalance_ratio: f64,
    seed: u64,
) -> DataResult<FeatureDataset<T>> {
    if !(imbalance_ratio >= 1.0) || !imbalance_ratio.is_finite() {
        return Err(DataError::Invalid(format!("imbalance ratio must be >= 1, got {imbalance_ratio}")));
    }
    let counts = ds.class_counts();
    let n_max = counts.first().copied().unwrap_or(0);
    if let Some(k) = counts.iter().position(|&c| c != n_max) {
        return Err(DataError::Invalid(format!(
            "long-tail profile needs balanced classes: class 0 has {n_max}, class {k} has {}",
            counts[k]
        )));
    }
    let keep = long_tail_counts(n_max, counts.len(), imbalance_ratio);
    let idx = draw(ds, &keep, &mut rng_from_seed(seed));
    Ok(ds.subset(&idx, &ds.split))
}

/// Stratified split: `round(val_fraction·n_c)` clamped to `[1, n_c − 1]`
/// rows of each class go to validation. Single-example classes stay in train.
pub fn split<T: Scalar>(
    ds: &FeatureDataset<T>,
    val_fraction: f64,
    seed: u64,
) -> DataResult<(FeatureDataset<T>, FeatureDataset<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Invalid(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let counts = ds.class_counts();
    let val_counts: Vec<usize> = counts
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            if n == 1 {
                log::warn!("class {k} has a single example; it stays in the training split");
            }
            if n < 2 {
                0
            } else {
                round_half_up(val_fraction * n as f64).clamp(1, n - 1)
            }
        })
        .collect();
    let val_idx = draw(ds, &val_counts, &mut rng_from_seed(seed));
    let mut in_val = vec![false; ds.len()];
    val_idx.iter().for_each(|&i| in_val[i] = true);
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| !in_val[i]).collect();
    Ok((ds.subset(&train_idx, "train"), ds.subset(&val_idx, "val")))
}
