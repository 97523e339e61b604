//! Deterministic random-stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha8 stream derived from a
//! 64-bit master seed plus a label and numeric path. Streams are independent
//! of each other and of call order, so callers can parallelize (episodes,
//! batch shards) without perturbing results, and training can resume at an
//! arbitrary step with bit-identical draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent random stream from `(seed, label, path)`.
///
/// The same triple always yields the same stream; distinct triples yield
/// streams with independent ChaCha keys.
pub fn derive_rng(seed: u64, label: &str, path: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for &p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
