//! Seeded random number generation.
//!
//! Every stochastic component (weight init, scene synthesis, augmentation,
//! shuffling, benchmark inputs) draws from [`SeededRng`], a xoshiro256++
//! generator expanded from a single `u64` seed with splitmix64. Same seed,
//! same bits, on every platform.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn derive(seed: u64, stream: u64) -> SeededRng {
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn uniform_vec(rng: &mut SeededRng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}
