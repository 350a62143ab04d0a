//! Seed derivation.
//!
//! Every random stream in the toolkit is keyed by `(master seed, purpose
//! label, index)`. The triple is hashed with SHA-256 and the digest seeds a
//! ChaCha8 generator, so streams never overlap and results do not depend on
//! the order in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive the 32-byte generator seed for `(seed, label, index)`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// Generator for `(seed, label, index)`.
pub fn rng_for(seed: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::from_seed(derive_seed(seed, label, index))
}

/// A child seed, for handing to an API that takes a plain `u64`.
pub fn child_seed(seed: u64, label: &str, index: u64) -> u64 {
    let bytes = derive_seed(seed, label, index);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}
