//! Keyed random streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream whose seed is
//! a SHA-256 digest of a master seed and a tuple of integer coordinates, so a
//! draw never depends on how many draws happened elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from `master` and the coordinate tuple `parts`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"fedshard.rng.v1");
    hasher.update(master.to_le_bytes());
    hasher.update((parts.len() as u64).to_le_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let out = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream domains, used as the first coordinate so distinct uses never collide.
pub(crate) const DOMAIN_INIT: u64 = 1;
pub(crate) const DOMAIN_LOCAL: u64 = 2;
pub(crate) const DOMAIN_MERGE: u64 = 3;
