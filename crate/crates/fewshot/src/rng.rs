//! Deterministic seeding with named substreams.
//!
//! A root seed fans out into independent streams (dataset generation,
//! episode sampling, parameter init, label noise, evaluation) so that
//! changing how one consumer draws randomness cannot shift any other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A point in the seed hierarchy. Deriving by label is order-independent:
/// `tree.derive("a")` is the same no matter what else was derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, label: &str) -> SeedTree {
        let mut state = self.seed ^ fnv1a64(label.as_bytes());
        let _ = splitmix64(&mut state);
        SeedTree {
            seed: splitmix64(&mut state),
        }
    }

    pub fn derive_indexed(&self, label: &str, index: u64) -> SeedTree {
        let mut state = self.seed ^ fnv1a64(label.as_bytes()) ^ index.wrapping_mul(0x9E3779B97F4A7C15);
        let _ = splitmix64(&mut state);
        SeedTree {
            seed: splitmix64(&mut state),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}
