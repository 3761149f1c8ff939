//! Deterministic RNG substreams.
//!
//! Every stochastic stage (bank sampling, augmentation draws, weight init,
//! scene placement) pulls its own named substream from one root seed, so
//! adding draws to one stage never perturbs another and runs replay exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG for `name` from the root seed.
///
/// The stream key is `SHA-256(root_le || 0x1f || name)`, so distinct names
/// give statistically independent streams and the mapping is stable across
/// platforms and releases.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a child root seed for `name`, for stages that re-branch.
pub fn derive(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
