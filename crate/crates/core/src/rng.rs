//! Seeded, splittable random streams.
//!
//! A stream is identified by `(seed, label)`. Its key is the SHA-256 digest of
//! the seed's eight little-endian bytes followed by the UTF-8 label, and the
//! digest seeds a ChaCha8 generator. Child streams extend the label with
//! `/child`, so every consumer (a client, an epoch, a data split) gets its own
//! reproducible sequence without sharing state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            label,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// An independent stream under the same seed. Does not advance `self`.
    pub fn derive(&self, child: impl AsRef<str>) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, child.as_ref()))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
