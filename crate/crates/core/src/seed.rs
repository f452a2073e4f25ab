//! Seed derivation.
//!
//! A single experiment seed fans out into per-purpose and per-client
//! sub-seeds by hashing `(parent, tag, ids...)`. Sub-seeds never depend on
//! the order in which clients or rounds are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a child seed from a parent seed, a purpose tag and a list of ids.
pub fn derive(parent: u64, tag: &str, ids: &[u64]) -> u64 {
    let mut h = splitmix64(parent ^ fnv1a(tag.as_bytes()));
    for &id in ids {
        h = splitmix64(h ^ splitmix64(id));
    }
    h
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
