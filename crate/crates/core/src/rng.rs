//! Named random sub-streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator for `(master, stream, index)`. Distinct stream
/// names or indices give statistically independent sequences.
pub fn substream(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a child seed, for APIs that take a plain `u64`.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    use rand::RngCore;
    substream(master, stream, index).next_u64()
}
