//! Seed plumbing.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from one
//! 64-bit master seed and a path of stream names, e.g.
//! `stream(seed, &["simulate", "replicate", "3", "train"])`. The derivation
//! folds each name into the seed with FNV-1a and finishes with a splitmix64
//! avalanche, so two different paths never share a stream and adding a new
//! consumer never shifts an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the child seed for `names` under `seed`.
pub fn derive_seed(seed: u64, names: &[&str]) -> u64 {
    let mut h = splitmix64(seed);
    for name in names {
        let mut f = FNV_OFFSET;
        for b in name.as_bytes() {
            f ^= u64::from(*b);
            f = f.wrapping_mul(FNV_PRIME);
        }
        // Separator so ["ab","c"] and ["a","bc"] differ.
        f ^= 0xff;
        f = f.wrapping_mul(FNV_PRIME);
        h = splitmix64(h ^ f);
    }
    h
}

pub fn stream(seed: u64, names: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, names))
}
