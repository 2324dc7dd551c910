//! Seed plumbing. Every stochastic component draws from its own ChaCha8
//! stream, keyed by a 64-bit seed derived from the run seed and a stream tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from `seed` and a stream index.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Stream tags used across the crate so that no two components share a stream.
pub mod stream {
    pub const WM_INIT: u64 = 1;
    pub const POLICY_INIT: u64 = 2;
    pub const BC: u64 = 3;
    pub const ACT: u64 = 4;
    pub const PPO: u64 = 5;
    pub const WM_CYCLE: u64 = 6;
    pub const SCORE: u64 = 7;
    pub const PHASE1: u64 = 8;
    pub const PASSIVE: u64 = 9;
    pub const CODEC: u64 = 10;
    pub const EVAL: u64 = 11;
}

/// FNV-1a, 64-bit. Stable across platforms and compiler versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
