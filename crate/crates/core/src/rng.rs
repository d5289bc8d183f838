//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose 32-byte
//! seed is `SHA-256(domain || 0x00 || seed_le || index_le)`. The algorithm is
//! fixed, so the same `(seed, domain, index)` reproduces the same stream on
//! every platform and build.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64, domain: &str, index: u64) -> Stream {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
