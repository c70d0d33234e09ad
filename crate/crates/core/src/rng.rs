//! Seed splitting. Every random consumer of a run draws from its own ChaCha
//! stream derived from the single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random consumers of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthesis = 1,
    Init = 2,
    Shuffle = 3,
    Undersample = 4,
    Dropout = 5,
    Augment = 6,
    DecoderInit = 7,
    Split = 8,
}

/// A generator for `stream` of the run seeded with `seed`, offset by `index`
/// (recording number, epoch, ...).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
