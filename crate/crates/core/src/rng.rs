//! Seeded, platform-independent random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Weights,
    Scores,
    Batches,
    Data,
    Shuffle,
    Reinit,
    SmartRatio,
    Bernoulli,
    Split,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Weights => 1,
            Stream::Scores => 2,
            Stream::Batches => 3,
            Stream::Data => 4,
            Stream::Shuffle => 5,
            Stream::Reinit => 6,
            Stream::SmartRatio => 7,
            Stream::Bernoulli => 8,
            Stream::Split => 9,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
