//! Seed derivation and counter-based random draws.
//!
//! Every stage seed is `derive_seed(master, stage, index)`:
//!
//! ```text
//! mix64(mix64(master ^ fnv1a64(stage)).wrapping_add(index))
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer and `fnv1a64` the 64-bit FNV-1a
//! hash of the stage name. Adding a stage never shifts another stage's seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    mix64(mix64(master ^ fnv1a64(stage.as_bytes())).wrapping_add(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hashes a sequence of words into one 64-bit counter value.
pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x6A09_E667_F3BC_C908, |h, &w| mix64(h ^ w))
}

/// Uniform draw in the open interval (0, 1) from a 64-bit hash.
pub fn unit_open(h: u64) -> f64 {
    ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw from a counter, via Box-Muller on two hashed uniforms.
pub fn normal_at(counter: u64) -> f64 {
    let u1 = unit_open(mix64(counter ^ 0xA5A5_A5A5_A5A5_A5A5));
    let u2 = unit_open(mix64(counter ^ 0x5A5A_5A5A_5A5A_5A5A));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
