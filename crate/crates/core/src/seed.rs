//! Derived RNG streams. Every random draw in the crate comes from a stream
//! keyed by the run seed plus a purpose tag, so draws for one purpose never
//! shift when another changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags.
pub const INIT: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const AUGMENT: u64 = 3;
pub const SCENE: u64 = 4;
pub const PROBE: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into one 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x51_7cc1_b727_220a, |h, &p| splitmix(h ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
