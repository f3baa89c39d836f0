//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`SplitMix64`] seeded from a
//! single user-facing `u64`. Sub-streams are derived with [`derive_seed`] so
//! that independent consumers (grid cells, subsamplers) never share state.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
pub use rand_xoshiro::SplitMix64;

use crate::Scalar;

pub type TesRng = SplitMix64;

pub fn rng_from_seed(seed: u64) -> TesRng {
    SplitMix64::seed_from_u64(seed)
}

/// Seed for the `index`-th child stream of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index)
}

pub fn gaussian<T: Scalar>(rng: &mut TesRng) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}
