//! Seeded randomness shared by every stage.
//!
//! All streams are ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`). Per-item
//! streams are keyed by `mix(seed) ^ index`, where `mix` is the SplitMix64
//! finaliser, so parallel and sequential generation agree byte for byte.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th item stream under `seed`.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    mix(seed) ^ index
}

/// Independent stream for a named purpose (split, init, shuffling...).
pub fn derived(seed: u64, tag: &str) -> Rng {
    let t = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    rng(mix(seed ^ t))
}

/// Uniform double in `[0, 1)` from the top 53 bits of one `u64` draw.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `[lo, hi)`; exactly `lo` when the range is degenerate.
pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform integer in `0..n` (modulo reduction; bias below 2^-40 for small n).
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// Fisher-Yates shuffle driven by [`below`].
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
