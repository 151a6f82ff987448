//! Deterministic randomness: named substreams of a master seed, and a
//! Gaussian sampler. No entropy is ever taken from the environment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A ChaCha stream derived from `(seed, name)` via FNV-1a, so independently
/// named consumers (per-parameter init, data generation, sampling decisions)
/// never share or disturb each other's sequences.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    for b in name.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Standard normal sample via Box-Muller. Draws exactly two uniforms per
/// call, which keeps consumption of the underlying stream predictable.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
