//! Seed derivation and the PRNG used everywhere in the crate.
//!
//! Every random choice is driven by [`ChaCha8Rng`] seeded through
//! [`rng`]. ChaCha8 is a portable, documented stream cipher RNG, so a given
//! seed reproduces the same tasks, samples and keys on every platform.
//! Sub-seeds for independent streams (one per target, per distractor count,
//! ...) are derived with the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the generator, recorded in run metadata.
pub const PRNG_ALGORITHM: &str = "ChaCha8Rng(seed_from_u64) / rand 0.8";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed and a path of components.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stable 64-bit digest of a string, for folding ids into seeds.
pub fn hash_str(s: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}
