//! Deterministic seed derivation.
//!
//! Every stochastic sub-computation in the workbench owns a seed derived
//! from a master seed by `master ^ fnv1a(role) ^ index`, so any piece of a
//! run can be reproduced in isolation without replaying the whole pipeline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a byte string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a sub-seed for a named role and index under a master seed.
pub fn derive_seed(master: u64, role: &str, index: u64) -> u64 {
    master ^ fnv1a(role.as_bytes()) ^ index
}

/// The workbench RNG. ChaCha8 is seedable, portable, and stream-stable,
/// so identical seeds reproduce identical draws on every platform.
pub type Rng = ChaCha8Rng;

/// RNG seeded for a derived role.
pub fn rng_for(master: u64, role: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, role, index))
}

/// RNG seeded directly.
pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
