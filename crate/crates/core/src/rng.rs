//! Seeded, splittable random streams.
//!
//! Every model role owns its own stream. Draws that decide a token at a given
//! sequence position come from a child stream keyed by that position, so the
//! sampled value depends only on `(seed, role, position)` and never on the
//! order in which workers happen to run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Logical owner of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Draft,
    Target,
    Verifier,
    /// Synthetic data generation (oracles, grids, prompts).
    Data,
    /// Free-form stream id for experiments and tests.
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Draft => 0x0d,
            Stream::Target => 0x7a,
            Stream::Verifier => 0x5e,
            Stream::Data => 0xda,
            Stream::Custom(id) => mix64(id ^ 0xc0ffee),
        }
    }
}

/// SplitMix64 finalizer. Also used for context hashing in the synthetic
/// oracles, so traces stay portable across implementations.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Anything that hands out uniform draws in `[0, 1)`.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

/// Source of per-position draw streams.
///
/// `at(position)` must return the same stream every time it is called with
/// the same position.
pub trait DrawSource {
    type Stream: UniformSource;
    fn at(&self, position: usize) -> Self::Stream;
}

/// ChaCha8-backed generator with an explicit seed and stream id.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream.id())
    }

    fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `key`. Independent of how far `self` has advanced.
    pub fn fork(&self, key: u64) -> SeededRng {
        Self::with_stream_id(self.seed, mix64(self.stream ^ mix64(key)))
    }

    /// Mutable access for callers that need `rand` distributions.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

impl UniformSource for SeededRng {
    fn next_uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl DrawSource for SeededRng {
    type Stream = SeededRng;

    fn at(&self, position: usize) -> SeededRng {
        self.fork(position as u64)
    }
}

/// Scripted draws, for pinning a hand-traced verification path.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDraws {
    values: Vec<f64>,
    cursor: usize,
}

impl ScriptedDraws {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, cursor: 0 }
    }
}

impl UniformSource for ScriptedDraws {
    fn next_uniform(&mut self) -> f64 {
        let v = self.values[self.cursor % self.values.len()];
        self.cursor += 1;
        v
    }
}

impl DrawSource for ScriptedDraws {
    type Stream = ScriptedDraws;

    /// Every position replays the same script from the start.
    fn at(&self, _position: usize) -> ScriptedDraws {
        ScriptedDraws::new(self.values.clone())
    }
}

/// The three streams a decoding run consumes.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub draft: SeededRng,
    pub target: SeededRng,
    pub verifier: SeededRng,
}

impl RunStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            draft: SeededRng::new(seed, Stream::Draft),
            target: SeededRng::new(seed, Stream::Target),
            verifier: SeededRng::new(seed, Stream::Verifier),
        }
    }
}
