//! Stable seed derivation.
//!
//! Every random stream in a simulation is keyed by
//! `(master_seed, entity, round, purpose)` so that adding a new consumer of
//! randomness never shifts an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    FrozenBase = 1,
    AdapterInit = 2,
    Teacher = 3,
    Batch = 4,
    UploadDare = 5,
    DownloadDare = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into one 64-bit seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x5EED_F00D_u64, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn derive_seed(master: u64, entity: u64, round: u64, purpose: Purpose) -> u64 {
    mix(&[master, entity, round, purpose as u64])
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
