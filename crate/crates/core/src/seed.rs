//! Splittable seeding.
//!
//! Every random stream is derived from `(master seed, stream id, index)`
//! with [`derive_seed`], so work items can be generated in any order or in
//! parallel and still draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_SCENE: u64 = 1;
pub const STREAM_LINK: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_SOURCE_BATCHES: u64 = 4;
pub const STREAM_TARGET_BATCHES: u64 = 5;
pub const STREAM_GRADCHECK: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(master ^ splitmix64(splitmix64(stream) ^ index))`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(splitmix64(stream) ^ index))
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
