//! The model interface the decoders talk to.

use serde::{Deserialize, Serialize};

use crate::prob::{sample, ProbDist, TokenId};
use crate::rng::DrawSource;

/// A language model reduced to its next-token distribution.
///
/// Implementations must be deterministic: the same prefix always yields the
/// same distribution.
pub trait ModelOracle {
    fn vocab(&self) -> usize;

    fn next_dist(&self, prefix: &[TokenId]) -> ProbDist;

    /// Cost of prefilling a prompt, in profile time units. Zero unless the
    /// oracle carries its own cost model.
    fn prefill_cost(&self, _prompt_len: usize) -> f64 {
        0.0
    }

    /// Cost of one forward pass during decoding.
    fn decode_cost(&self) -> f64 {
        0.0
    }
}

impl<M: ModelOracle + ?Sized> ModelOracle for &M {
    fn vocab(&self) -> usize {
        (**self).vocab()
    }
    fn next_dist(&self, prefix: &[TokenId]) -> ProbDist {
        (**self).next_dist(prefix)
    }
    fn prefill_cost(&self, prompt_len: usize) -> f64 {
        (**self).prefill_cost(prompt_len)
    }
    fn decode_cost(&self) -> f64 {
        (**self).decode_cost()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Stochastic,
}

impl DecodeMode {
    /// Picks a token from `dist`, drawing from the stream keyed by `position`.
    pub fn pick<D: DrawSource>(self, dist: &ProbDist, draws: &D, position: usize) -> TokenId {
        match self {
            DecodeMode::Greedy => dist.argmax(),
            DecodeMode::Stochastic => sample(dist, &mut draws.at(position)),
        }
    }
}

/// Plain autoregressive decoding with the target alone. Returns only the new tokens.
pub fn generate_ar<M, D>(target: &M, prompt: &[TokenId], max_new: usize, mode: DecodeMode, draws: &D) -> Vec<TokenId>
where
    M: ModelOracle + ?Sized,
    D: DrawSource,
{
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let dist = target.next_dist(&seq);
        let pos = seq.len();
        seq.push(mode.pick(&dist, draws, pos));
    }
    seq.split_off(prompt.len())
}
