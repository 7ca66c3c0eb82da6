//! Seed derivation helpers.
//!
//! Every stochastic component takes an explicit [`Rng`]; seeds for nested
//! scopes (per config, per run, per episode) are derived with a splitmix64
//! finalizer so that streams never alias across scopes.

use rand::SeedableRng;

/// The one RNG used throughout the crate. ChaCha keeps streams reproducible
/// across platforms and library versions.
pub type Rng = rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a list of scope indices.
pub fn derive_seed(base: u64, scope: &[u64]) -> u64 {
    let mut acc = mix(base);
    for &s in scope {
        acc = mix(acc ^ s.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    acc
}

/// ChaCha stream seeded from a base seed and scope indices.
pub fn rng_for(base: u64, scope: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, scope))
}
