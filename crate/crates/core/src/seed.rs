//! Named random sub-streams derived from a single run seed.
//!
//! Every stochastic stage (world generation, synthesis, training, evaluation)
//! draws from its own stream so that switching one stage on or off never
//! shifts the random numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Derives a 64-bit seed for the sub-stream `name` of `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Generator for the sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> StageRng {
    StageRng::seed_from_u64(derive_seed(seed, name))
}

pub fn rng_from_seed(seed: u64) -> StageRng {
    StageRng::seed_from_u64(seed)
}
