//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (a counter-based
//! generator) keyed by a 64-bit seed plus a stream id, so initialization,
//! dropout, data generation and shuffling never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Data = 3,
    Shuffle = 4,
    Probe = 5,
    MultiViewInit = 6,
}

pub fn seeded(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
