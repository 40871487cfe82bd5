//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from a base seed, a purpose tag, and an index. Sub-streams for
//! different purposes (cohort profiles, per-segment noise, shuffling,
//! dropout, upsampling) therefore never interleave, and adding parallelism
//! cannot perturb any of them.
//!
//! The derivation hash is FNV-1a over the little-endian base seed, the tag
//! bytes, and the little-endian index. FNV-1a is pinned here (rather than
//! `std`'s `DefaultHasher`) because its output is stable across Rust
//! releases and platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the RNG scheme, recorded in run and cohort manifests.
pub const RNG_ALGORITHM: &str = "chacha8 seeded via fnv1a-64(base, tag, index)";

/// Derive a sub-seed for `(tag, index)` from a base seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in base
        .to_le_bytes()
        .iter()
        .chain(tag.as_bytes())
        .chain(&index.to_le_bytes())
    {
        h = (h ^ *b as u64).wrapping_mul(PRIME);
    }
    h
}

/// A ChaCha8 stream for `(tag, index)` under the given base seed.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}
