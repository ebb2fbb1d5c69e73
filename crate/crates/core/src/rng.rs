//! Named, independently seeded random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Splits a run seed into reproducible sub-streams (`init`, `ia`, `fa`,
/// `dropout`, `shuffle`, ...). Streams with different names or indices are
/// statistically independent; the same name and index always yield the same
/// sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        self.indexed(name, 0)
    }

    pub fn indexed(&self, name: &str, index: u64) -> StreamRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(index.to_le_bytes());
        StreamRng::from_seed(h.finalize().into())
    }
}
