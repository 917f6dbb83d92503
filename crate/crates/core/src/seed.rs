//! Seed splitting.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by
//! `(master seed, stream tag, index)`. The key is hashed with splitmix64 so
//! that neighbouring indices give unrelated streams. Per-particle or
//! per-member streams make results independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod streams {
    pub const INIT_STATES: u64 = 0x01;
    pub const INPUTS: u64 = 0x02;
    pub const CONDITIONAL: u64 = 0x03;
    pub const PERMUTATION: u64 = 0x04;
    pub const SLICED: u64 = 0x05;
    pub const PARTICLE_FILTER: u64 = 0x06;
    pub const RESAMPLE: u64 = 0x07;
    pub const LOW_DISCREPANCY: u64 = 0x08;
    pub const SCAN: u64 = 0x09;
    pub const ENVELOPE: u64 = 0x0a;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.rotate_left(32)) ^ index)
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
