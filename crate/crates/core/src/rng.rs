//! Seeded random streams.
//!
//! Every random decision in the pipeline draws from a ChaCha stream keyed by
//! the experiment seed plus a tuple of integers naming the decision (domain
//! tag, cell index, rotation index, ...). Results therefore depend only on
//! that tuple, never on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_JITTER: u64 = 1;
pub const TAG_VIEW: u64 = 2;
pub const TAG_SHUFFLE: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_FOLDS: u64 = 5;
pub const TAG_TTA: u64 = 6;
pub const TAG_SYNTH: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream from `seed` and a key tuple.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
