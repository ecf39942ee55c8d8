//! Random number streams.
//!
//! The chain owns a single master stream. Parallel sections draw one
//! [`StreamKey`] from the master and give every work item its own ChaCha
//! stream selected by the item's index, so results never depend on how
//! rayon splits the work.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill(&mut key);
        StreamKey(key)
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::draw(&mut seeded(seed))
    }

    /// Independent stream for work item `index`.
    pub fn stream(&self, index: u64) -> ChainRng {
        let mut rng = ChaCha8Rng::from_seed(self.0);
        rng.set_stream(index);
        rng
    }
}
