//! Seeded randomness. Every stochastic routine in the crate takes an explicit
//! seed and derives its generator here, so runs are reproducible bit for bit.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type DeskRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> DeskRng {
    DeskRng::seed_from_u64(seed)
}

/// Derive an independent stream for a named sub-purpose of a run.
pub fn derived(seed: u64, stream: u64) -> DeskRng {
    let mut rng = DeskRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut DeskRng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}
