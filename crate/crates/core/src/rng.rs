//! Seeded random streams. Every random choice in the crate draws from one of
//! these, keyed by the configured seed and a fixed stream number.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    BackboneInit = 1,
    Pretrain = 2,
    DecoderFit = 3,
    BridgeInit = 4,
    DataOrder = 5,
    Sampling = 6,
    Corpus = 7,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A sub-stream of `stream` keyed by `index`, e.g. one per training epoch.
pub fn seeded_indexed(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | stream as u64);
    rng
}
