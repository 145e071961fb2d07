//! Deterministic, labelled random streams.
//!
//! Every stochastic step in the crate draws from a stream derived from the run
//! seed and a stage-specific label, so any stage can be re-run in isolation and
//! reproduce the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Concrete stream type handed out by [`seeded_rng`].
pub type RandomStream = ChaCha8Rng;

/// Derive the stream for `(seed, label)`.
///
/// The key is a SHA-256 of the seed and the length-prefixed label, so distinct
/// labels (including labels that are prefixes of each other) give unrelated keys.
pub fn seeded_rng(seed: u64, stream_label: &str) -> RandomStream {
    let mut hasher = Sha256::new();
    hasher.update(b"logoins/stream/v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((stream_label.len() as u64).to_le_bytes());
    hasher.update(stream_label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// A run seed that fans out into labelled streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSource {
    seed: u64,
}

impl SeedSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> RandomStream {
        seeded_rng(self.seed, label)
    }

    /// A new source whose streams are disjoint from this one's.
    pub fn child(&self, label: &str) -> SeedSource {
        use rand::RngCore;
        let mut rng = self.stream(&format!("child:{label}"));
        SeedSource::new(rng.next_u64())
    }
}

/// Fill a vector with i.i.d. standard normal draws.
pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
