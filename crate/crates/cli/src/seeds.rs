//! Named RNG streams derived from the single top-level seed.
//!
//! Each stream hashes the seed together with a stream name and its scope
//! (frame id, camera id), so adding, removing or reordering work elsewhere
//! never shifts the numbers another stream sees.

use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}
