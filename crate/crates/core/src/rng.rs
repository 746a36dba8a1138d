//! Named random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Splits a root seed into independent, reproducible substreams keyed by
/// component name (`"encoder/init"`, `"synth/scene0"`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        SeedStreams { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed_for(&self, name: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn stream(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.seed_for(name))
    }
}
