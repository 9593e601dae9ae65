//! Deterministic random streams.
//!
//! Every consumer of randomness draws from a ChaCha8 generator seeded with
//! the run seed and a fixed stream id, so independent parts of a run (for
//! example augmentation and batch shuffling) never perturb each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids used inside the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const CHANNEL: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const NULL_MODEL: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
