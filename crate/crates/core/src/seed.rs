//! Seed derivation.
//!
//! Every random draw in the toolkit flows from an explicit `u64` seed. Child
//! seeds are derived with a splitmix64 finalizer so that streams for
//! different purposes (splits, batches, dropout, bootstraps) never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 output function; a bijection on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed of child stream `index` from `seed`.
///
/// For a fixed parent seed, distinct indices give distinct children.
pub fn derive(seed: u64, index: u64) -> u64 {
    mix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Derive along a path of stream indices.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &i| derive(s, i))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named streams used across modules.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const MEMBER: u64 = 5;
    pub const FOREST: u64 = 6;
    pub const KFOLD: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    pub const SNAPSHOT: u64 = 9;
}
