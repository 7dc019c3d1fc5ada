//! Seed derivation. Every random stream in the pipeline is a ChaCha8 stream
//! keyed by a seed mixed with stable identifiers, so results do not depend on
//! iteration order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a sequence of stream identifiers.
pub fn derive_seed(seed: u64, ids: &[u64]) -> u64 {
    ids.iter().fold(mix64(seed), |acc, &id| mix64(acc ^ mix64(id)))
}

pub fn rng_from(seed: u64, ids: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, ids))
}

/// Stream identifiers for the distinct uses of randomness.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const DISTORT: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const PAIRS: u64 = 7;
    pub const FINETUNE: u64 = 8;
    pub const INVARIANCE: u64 = 9;
}
