//! Seeded random streams. Every stochastic component takes an explicit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Array;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child stream derived from `seed` and a label.
pub fn stream(seed: u64, label: u64) -> Rng {
    // splitmix64 mixing keeps nearby (seed, label) pairs decorrelated
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_array(rng: &mut Rng, rows: usize, cols: usize) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect())
}

/// Seed of the child stream `stream(seed, label)`, for APIs taking a seed.
pub fn derive(seed: u64, label: u64) -> u64 {
    rand::RngCore::next_u64(&mut stream(seed, label))
}
