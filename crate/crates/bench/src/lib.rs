//! Seeded inputs shared by the kernel benchmarks.

use ncl_core::data::{build_dataset, PairRecord, SyntheticSpec};
use ncl_core::BatchSimilarities;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` values from two well-separated loss modes.
pub fn bimodal_losses(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let base = if i % 3 == 0 { 1.0 } else { 0.05 };
            base + rng.random_range(-0.02..0.02)
        })
        .collect()
}

/// Square similarity matrix with entries in [-1, 1].
pub fn random_similarities(n: usize, seed: u64) -> BatchSimilarities {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    BatchSimilarities::from_flat(n, data).expect("square by construction")
}

pub fn random_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Training split of a small default synthetic bundle.
pub fn training_records(n_train: usize, seed: u64) -> Vec<PairRecord> {
    let spec = SyntheticSpec {
        n_train,
        n_val: 1,
        n_test: 1,
        seed,
        ..SyntheticSpec::default()
    };
    build_dataset(&spec).expect("default spec is valid").train
}
