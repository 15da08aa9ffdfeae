//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from
//! `(base seed, stream tag, index)`, so results never depend on iteration or
//! thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

// Stream tags.
pub const TAG_GRAPH: u64 = 0x01;
pub const TAG_RANDOM_PLL: u64 = 0x02;
pub const TAG_ANNOTATOR_PLL: u64 = 0x03;
pub const TAG_COMPETITIVE_PLL: u64 = 0x04;
pub const TAG_INIT: u64 = 0x10;
pub const TAG_SHUFFLE: u64 = 0x11;
pub const TAG_KMEANS: u64 = 0x12;
pub const TAG_GRADCHECK: u64 = 0x13;
