//! Keyed random streams. Every stochastic step draws from a stream derived
//! from `(seed, tag, indices)` so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    Rng::from_seed(digest)
}
