//! Seeded random streams.
//!
//! Every stochastic component receives its own stream derived from a master
//! seed and a purpose label:
//!
//! ```text
//! stream_seed = first 8 bytes (little endian) of SHA-256(master_seed_le || label)
//! stream      = ChaCha8Rng::seed_from_u64(stream_seed)
//! ```
//!
//! Labels are plain strings such as `"train/shuffle"` or `"eval/3"`, so a run
//! can be replayed exactly from its master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives the 64-bit seed of the stream `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Opens the stream `label` under `master`.
pub fn stream(master: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
