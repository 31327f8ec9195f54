//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(root seed, label, index)`. Streams never share state, so the draws a
//! module makes do not depend on what other modules consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Root of a seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Independent generator for `(label, index)`.
    pub fn stream(&self, label: &str, index: u64) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        hasher.update(index.to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// A child tree, for handing a sub-experiment its own namespace.
    pub fn child(&self, label: &str, index: u64) -> SeedTree {
        use rand::RngCore;
        SeedTree::new(self.stream(label, index).next_u64())
    }
}
