//! Seed derivation. Every random choice in the crate flows from one master
//! seed through named sub-seeds, so individual components stay reproducible
//! in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice. Stable across platforms and releases, unlike
/// the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derive a named sub-seed from the master seed.
pub fn subseed(master: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    fnv1a(&bytes)
}

/// Derive a sub-seed from the master seed and a sequence of ids (e.g. caption
/// tokens), so identical content yields identical streams.
pub fn subseed_ids(master: u64, label: &str, ids: &[usize]) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len() + ids.len() * 8);
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    for &id in ids {
        bytes.extend_from_slice(&(id as u64).to_le_bytes());
    }
    fnv1a(&bytes)
}

/// The crate's deterministic generator.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
