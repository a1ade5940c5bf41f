//! Deterministic seed derivation so every stage draws from its own stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer over `(seed, stream)`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}

/// Stable stream tags.
pub mod stream {
    pub const VEHICLES: u64 = 1;
    pub const LIDAR: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const FRAGMENT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const FALSE_POSITIVE: u64 = 6;
    pub const INIT_PARAMS: u64 = 7;
    pub const TRAIN: u64 = 8;
    pub const SIZE_BASELINE: u64 = 9;
}
