//! Named random streams.
//!
//! Every random draw in the crate comes from a stream derived from a root
//! seed, a stream name and a list of indices (image id, epoch, ...). Streams
//! are independent of the order in which they are created, so per-image work
//! can be scheduled in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

fn digest(seed: u64, name: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for idx in indices {
        hasher.update(idx.to_le_bytes());
    }
    let out = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&out);
    bytes
}

/// Returns the RNG for stream `name` at `indices` under `seed`.
pub fn stream(seed: u64, name: &str, indices: &[u64]) -> StreamRng {
    ChaCha8Rng::from_seed(digest(seed, name, indices))
}

/// Derives a child seed, used when a sub-component takes a plain `u64`.
pub fn derive_seed(seed: u64, name: &str, indices: &[u64]) -> u64 {
    let d = digest(seed, name, indices);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
