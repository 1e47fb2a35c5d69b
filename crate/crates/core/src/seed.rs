//! Labeled seed derivation.
//!
//! Every subsystem draws its randomness from `derive(global, label)`, so the
//! stream a component sees depends only on the global seed and its label,
//! not on how many draws other components made before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Child seed for `label` under `global`.
pub fn derive(global: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `rng(derive(global, label))`.
pub fn rng_for(global: u64, label: &str) -> Rng {
    rng(derive(global, label))
}

/// Stable 64-bit digest of arbitrary bytes.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("sha256 has 32 bytes"))
}
