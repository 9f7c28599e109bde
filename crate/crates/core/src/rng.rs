//! Seeded random streams.
//!
//! Every random consumer in the crate derives its own stream from a master seed
//! plus a stable offset, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Offsets in the seed derivation tree used by the experiment harness.
pub mod offsets {
    pub const SPLIT: u64 = 1;
    pub const FOLDS: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const GRID: u64 = 5;
    pub const IMPUTATION_BASE: u64 = 100;
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from `seed` and an integer path. SplitMix64 finalizer,
/// so nearby inputs map to unrelated outputs.
pub fn derive(seed: u64, offset: u64) -> u64 {
    let mut z = seed
        .wrapping_add(offset.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &p| derive(s, p))
}
