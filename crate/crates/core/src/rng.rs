//! Seed derivation. Every stream is a ChaCha8 generator keyed by the root
//! seed and a stable hash of a purpose label, so subsystems never share
//! randomness and a run is reproducible from one number.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, stable across platforms and compiler versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream named `label` under `root`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    mix(root ^ mix(fnv1a(label.as_bytes())))
}

/// Seed for the `index`-th member of a family of streams (per batch, per epoch).
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    mix(derive_seed(root, label) ^ mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
