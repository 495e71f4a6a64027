//! Deterministic seeding.
//!
//! Every randomized operation takes an explicit seed and builds a
//! `ChaCha8Rng` from it, so runs agree across platforms. Per-item seeds are
//! derived by mixing the run seed with a stable 64-bit hash of the item key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Portable generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// FNV-1a over the UTF-8 bytes of `key`.
pub fn stable_hash(key: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in key.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one item, derived from the run seed and a key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    mix64(seed ^ mix64(stable_hash(key)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn item_rng(seed: u64, key: &str) -> Rng {
    rng_from_seed(derive_seed(seed, key))
}
