//! Sub-seed derivation.
//!
//! Every command takes one seed; independent random streams (shuffling,
//! dropout, frame sampling, ...) get their own seed as
//! `splitmix64(seed ^ splitmix64(stream))`, where `stream` is a small
//! per-purpose constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub fn rng(seed: u64, stream: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream))
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const FRAMES: u64 = 4;
    pub const VAL_FRAMES: u64 = 5;
    pub const TRIALS: u64 = 6;
    pub const WORLD: u64 = 7;
    pub const JITTER: u64 = 8;
}
