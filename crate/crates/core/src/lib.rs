//! Speculative decoding simulation for video language models.
//!
//! The crate covers the pieces needed to study speculative decoding when the
//! draft model sees a pruned video:
//!
//! * [`prob`] and [`serial`]: the accept/resample rule and classic
//!   draft-then-verify decoding.
//! * [`preserve`]: scoring visual tokens by text attention, temporal change
//!   and spatial diversity, then keeping the top fraction.
//! * [`bias`]: how much of a selection falls on frame boundaries.
//! * [`schedule`]: draft and target running in parallel, with optimistic and
//!   conservative modes.
//! * [`latency`]: the virtual-clock cost model that turns logs into speedups.
//! * [`sim`]: synthetic model pairs and token grids.
//! * [`harness`]: experiment configuration, runs and sweeps.

pub mod bias;
pub mod error;
pub mod harness;
pub mod latency;
pub mod oracle;
pub mod preserve;
pub mod prob;
pub mod rng;
pub mod schedule;
pub mod serial;
pub mod sim;
pub mod tensor_io;
pub mod trace;

/// First line of every CSV file the crate writes.
pub const CSV_VERSION: &str = "# specdeck-csv v1";

pub use error::{Error, Result};
pub use oracle::{DecodeMode, ModelOracle};
pub use prob::{ProbDist, TokenId};
pub use rng::{RunStreams, SeededRng, Stream};

/// The guide's chapters, compiled as doc tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/speculative-sampling.md")]
    struct SpeculativeSampling;
    #[doc = include_str!("../../../book/src/parallel-decoding.md")]
    struct ParallelDecoding;
    #[doc = include_str!("../../../book/src/latency.md")]
    struct Latency;
    #[doc = include_str!("../../../book/src/token-preservation.md")]
    struct TokenPreservation;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
}
