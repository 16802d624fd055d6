//! Deterministic expansion of one master seed into independent named streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// A master seed from which per-purpose, per-node random streams are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        SeedTree { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream for `domain` keyed by an arbitrary path of integers
    /// (iteration, node id, ...). Distinct inputs give unrelated streams.
    pub fn stream(&self, domain: &str, path: &[u64]) -> ChaCha20Rng {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update((domain.len() as u64).to_le_bytes());
        h.update(domain.as_bytes());
        for p in path {
            h.update(p.to_le_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(seed)
    }
}
