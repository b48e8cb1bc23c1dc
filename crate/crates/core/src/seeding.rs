//! Named random streams derived from one root seed.
//!
//! Each stream is the ChaCha8 generator of the root seed with its own stream
//! id, so drawing more numbers from one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Augment = 4,
    Scenario = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// A `u64` drawn from a stream, for APIs that take a seed.
pub fn derived_seed(seed: u64, which: Stream) -> u64 {
    use rand::Rng;
    stream(seed, which).random()
}

/// The generators a training run consumes.
#[derive(Debug, Clone)]
pub struct TrainStreams {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            init: stream(seed, Stream::Init),
            shuffle: stream(seed, Stream::Shuffle),
            augment: stream(seed, Stream::Augment),
        }
    }
}
