//! Seed derivation.
//!
//! Every random decision in a run is driven by a seed derived from a single
//! root seed. Derivation is `splitmix64(parent ^ fnv1a64(label))`, so a child
//! seed depends only on its parent and a stable textual label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the SplitMix64 generator, used as a 64-bit mixing function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive a named child seed.
pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ fnv1a64(label.as_bytes()))
}

/// Derive a child seed from a numeric component (grid values, indices).
pub fn derive_u64(parent: u64, component: u64) -> u64 {
    splitmix64(parent ^ splitmix64(component))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
