//! Seed derivation and deterministic random initialization helpers.
//!
//! Every random decision in the crate flows from a `ChaCha8Rng` seeded
//! through [`subseed`], so distinct phases (data generation, adapter init,
//! epoch shuffles, ...) draw from independent, reproducible streams.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derive a phase-specific seed from a base seed and a label.
///
/// FNV-1a over the label, mixed with the base seed by a splitmix64 round.
pub fn subseed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base.wrapping_add(h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(base, tag))
}

/// Standard-normal draws via Box-Muller (two uniforms per pair of values).
pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64], std: f64) {
    let mut i = 0;
    while i < out.len() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = r * theta.cos() * std;
        i += 1;
        if i < out.len() {
            out[i] = r * theta.sin() * std;
            i += 1;
        }
    }
}

/// A shuffled index permutation of `0..n`.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
