//! Named, seeded random substreams.
//!
//! Every randomized operation draws from a ChaCha stream keyed by the run
//! seed, a purpose label and a list of indices, so any component can be
//! replayed in isolation without consuming draws from another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive an independent generator for `(seed, label, indices)`.
pub fn substream(seed: u64, label: &str, indices: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Derive a plain integer seed, for APIs that take `u64` seeds.
pub fn subseed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    use rand::RngCore;
    substream(seed, label, indices).next_u64()
}
