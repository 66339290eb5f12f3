//! Reproducible random streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream addressed by
//! `(base_seed, seed_index, purpose)`. Streams for different purposes never
//! share state, so adding a consumer (a diagnostic, a new perturbation) does
//! not shift the draws seen by any other consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Environment = 1,
    Episode = 2,
    ArmSelection = 3,
    Perturbation = 4,
    Verification = 5,
}

/// Seed material for one independent run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RunSeed {
    pub base_seed: u64,
    pub seed_index: u64,
}

impl RunSeed {
    pub fn new(base_seed: u64, seed_index: u64) -> Self {
        Self {
            base_seed,
            seed_index,
        }
    }

    pub fn stream(&self, purpose: Purpose) -> StreamRng {
        stream(self.base_seed, self.seed_index, purpose)
    }
}

/// The ChaCha8 stream for `(base_seed, seed_index, purpose)`.
pub fn stream(base_seed: u64, seed_index: u64, purpose: Purpose) -> StreamRng {
    let key = splitmix64(splitmix64(base_seed) ^ seed_index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(purpose as u64);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
