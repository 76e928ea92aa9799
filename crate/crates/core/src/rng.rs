//! Seed derivation. Every random stream is an explicit ChaCha generator
//! derived from an integer seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for `(seed, stream, index)`.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream)) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn rng(seed: u64, stream: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}

pub mod streams {
    pub const CLIP: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DATA_ORDER: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const CODEBOOK: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const MIX: u64 = 7;
}
