//! Reproducible seed fan-out.
//!
//! Every derived stream is `splitmix64(master ⊕ splitmix64(tag) ⊕ index·φ)`,
//! so run `k` of a sweep always sees the same generator regardless of the
//! order in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used across the crate. Changing these changes every output.
pub mod tag {
    pub const MODEL: u64 = 0x6d6f_6465_6c00;
    pub const INIT: u64 = 0x696e_6974_0000;
    pub const RUN: u64 = 0x7275_6e00_0000;
    pub const CELL: u64 = 0x6365_6c6c_0000;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag) ^ index.wrapping_mul(GOLDEN))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
