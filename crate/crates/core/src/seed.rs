//! Seed derivation. Every random component of a run draws from its own
//! ChaCha8 stream keyed by `derive(master, stream)`, so a single `--seed`
//! reproduces a whole experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_RFF: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;
pub const STREAM_SEARCH: u64 = 5;
pub const STREAM_DATA: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `stream` under `master`.
pub fn derive(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
