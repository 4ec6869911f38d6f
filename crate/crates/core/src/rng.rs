//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a root
//! seed plus a path of integer tags, so results never depend on the order in
//! which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Kept distinct so unrelated consumers never share a stream.
pub mod tag {
    pub const WORLD: u64 = 1;
    pub const EPISODE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const ORDER: u64 = 4;
    pub const INNER: u64 = 5;
    pub const OUTER: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const ANALYSIS: u64 = 8;
    pub const PAD: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a path of tags into a 64-bit stream seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}
