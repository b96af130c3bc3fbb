//! Shared fixtures for the benchmarks.

use permcca_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Standard normal matrix from a fixed seed.
pub fn normal(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Nuisance matrix with an intercept first.
pub fn nuisance(rows: usize, extra: usize, seed: u64) -> Mat {
    let mut z = normal(rows, extra + 1, seed);
    z.column_mut(0).fill(1.0);
    z
}
