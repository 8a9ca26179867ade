//! Counter-based seed derivation. Every random stream in the crate is a
//! ChaCha generator keyed by a seed mixed from a base seed and a path of
//! counters, so results never depend on the order streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each counter in `path`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Stream tags, so unrelated consumers of the same base seed never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DATA: u64 = 4;
    pub const FOLDS: u64 = 5;
    pub const MEMBER: u64 = 6;
    pub const FOLD_INIT: u64 = 7;
    pub const MC_MASK: u64 = 8;
}
