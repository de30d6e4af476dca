//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Well-known stream names.
pub mod stream {
    pub const INIT: &str = "init";
    pub const BATCHING: &str = "batching";
    pub const MODEL_INIT: &str = "model-init";
    pub const NOISE: &str = "noise";
}

/// Derives an independent generator for `(master, name, index)`.
///
/// The derivation is a SHA-256 of the three parts, so streams are stable
/// across platforms and never alias each other.
pub fn derive(master: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a plain `u64` seed, for APIs that take one.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    use rand::RngCore;
    derive(master, name, index).next_u64()
}
