//! Seed derivation. Every random stream in the pipeline is keyed by the
//! top-level seed, a label naming the stage and purpose, and a list of
//! integer indices. No stream ever depends on global state or call order.
//!
//! The derived seed is the first eight bytes (little-endian) of
//! `SHA-256(seed_le ‖ len(label)_le ‖ label ‖ index_le…)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for i in indices {
        hasher.update(i.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, indices))
}
