//! Reproducible random streams.
//!
//! Every consumer of randomness derives its generator from a root seed and a
//! stream identifier. ChaCha's 64-bit stream selector gives independent,
//! counter-based streams without any state shared between them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers so that dataset, training and evaluation draws
/// never overlap for a given root seed.
pub mod streams {
    pub const FIELD: u64 = 1;
    pub const BC: u64 = 2;
    pub const LABELED: u64 = 3;
    pub const UNLABELED: u64 = 4;
    pub const QUERY: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const INIT: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const UQ: u64 = 10;
    pub const CONSTRAINTS: u64 = 11;
}

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for the `index`-th item of a stream: used when items are produced
/// in parallel and each must be reproducible on its own.
pub fn item(seed: u64, stream_id: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream_id);
    rng
}

/// Derives a child seed, e.g. one per experiment repeat.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
