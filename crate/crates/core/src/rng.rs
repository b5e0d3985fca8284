//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a stream keyed by a base seed and
//! a short tuple of integers (epoch, drop, realization, master, ...). Parallel
//! schedules therefore cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from `seed` and `key`.
pub fn stream(seed: u64, key: &[u64]) -> SimRng {
    let mut h = splitmix(seed);
    for &k in key {
        h = splitmix(h ^ splitmix(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream tags, so that e.g. shadowing and sampling for the same realization
/// never share a stream.
pub mod tag {
    pub const AP_PLACEMENT: u64 = 1;
    pub const TRAIN_POSITIONS: u64 = 2;
    pub const TEST_POSITIONS: u64 = 3;
    pub const TRAIN_SHADOW: u64 = 4;
    pub const TEST_SHADOW: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const VALIDATE: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
