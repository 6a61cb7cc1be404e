//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a
//! master seed mixed with stream-specific tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SessionRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with any number of tags into a new seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(mix64(seed), |acc, &t| mix64(acc.rotate_left(23) ^ mix64(t)))
}

pub fn seeded(seed: u64, tags: &[u64]) -> SessionRng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
