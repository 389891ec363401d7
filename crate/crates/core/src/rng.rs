//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 keystream whose 256-bit key is the tuple
//! `(seed, site, step)`, so a dropout mask depends only on the run seed,
//! which dropout site drew it, and the optimizer step, never on how many
//! numbers other sites consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies one dropout draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    /// Which dropout call site within the model.
    pub site: u64,
    /// Training step counter.
    pub step: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, site: u64, step: u64) -> Self {
        DropoutKey { seed, site, step }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        keyed_rng(self.seed, self.site, self.step, 0)
    }
}

/// Stream used for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    keyed_rng(seed, u64::MAX, 0, 1)
}

fn keyed_rng(a: u64, b: u64, c: u64, domain: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([a, b, c, domain]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
