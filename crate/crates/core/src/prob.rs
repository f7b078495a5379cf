//! Probability vectors and the speculative-sampling primitive.
//!
//! A drafted token `x ~ q` is kept with probability `min(1, p[x] / q[x])`.
//! On rejection a replacement is drawn from the residual
//! `norm(max(0, p - q))`. Together the two steps emit tokens distributed
//! exactly as `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::UniformSource;

pub type TokenId = u32;

/// Absolute tolerance on the sum of a stored distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Inputs whose sum is off by at most this much are renormalized instead of rejected.
pub const RENORMALIZE_WINDOW: f64 = 1e-6;

/// A normalized distribution over a vocabulary of at least two tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    /// Accepts a vector that already sums to 1 within [`RENORMALIZE_WINDOW`].
    /// Vectors within [`SUM_TOLERANCE`] are stored unchanged.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum = check_entries(&probs)?;
        if (sum - 1.0).abs() > RENORMALIZE_WINDOW {
            return Err(Error::InvalidDist(format!("entries sum to {sum}")));
        }
        if (sum - 1.0).abs() <= SUM_TOLERANCE {
            return Ok(Self { probs });
        }
        Ok(Self::renormalized(probs, sum))
    }

    /// Normalizes any non-negative weight vector with positive mass.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum = check_entries(&weights)?;
        if sum <= 0.0 {
            return Err(Error::InvalidDist("zero total mass".into()));
        }
        Ok(Self::renormalized(weights, sum))
    }

    /// Softmax at temperature 1, max-shifted.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidDist("non-finite logit".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::from_weights(logits.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn one_hot(vocab: usize, token: TokenId) -> Result<Self> {
        if token as usize >= vocab {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        let mut probs = vec![0.0; vocab];
        probs[token as usize] = 1.0;
        Self::new(probs)
    }

    fn renormalized(mut probs: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Self { probs }
    }

    pub fn vocab(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    /// Most likely token; the lowest id wins ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Total-variation distance to `other`.
    pub fn tv_distance(&self, other: &ProbDist) -> Result<f64> {
        same_vocab(self, other)?;
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.vocab() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbDist::new(v)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(d: ProbDist) -> Self {
        d.probs
    }
}

fn check_entries(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidDist(format!("vocabulary size {} < 2", probs.len())));
    }
    if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidDist(format!("entry {bad} is not a probability")));
    }
    Ok(probs.iter().sum())
}

fn same_vocab(p: &ProbDist, q: &ProbDist) -> Result<()> {
    if p.vocab() != q.vocab() {
        return Err(Error::VocabMismatch {
            left: p.vocab(),
            right: q.vocab(),
        });
    }
    Ok(())
}

/// Draws one token from `dist`, consuming exactly one uniform.
pub fn sample<R: UniformSource + ?Sized>(dist: &ProbDist, rng: &mut R) -> TokenId {
    let u = rng.next_uniform();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
    }
    // Rounding left `acc` just below 1.
    last_nonzero as TokenId
}

/// Probability of keeping draft token `x`: 1 when `p[x] >= q[x]`, else `p[x]/q[x]`.
///
/// `q[x] == 0` means `x` could not have been drafted; the call then returns 1.
pub fn accept_prob(p: &ProbDist, q: &ProbDist, x: TokenId) -> Result<f64> {
    same_vocab(p, q)?;
    p.check_token(x)?;
    let (px, qx) = (p.prob(x), q.prob(x));
    if qx == 0.0 || px >= qx {
        Ok(1.0)
    } else {
        Ok(px / qx)
    }
}

/// `norm(max(0, p - q))`, or `p` itself when that vector is identically zero.
pub fn residual(p: &ProbDist, q: &ProbDist) -> Result<ProbDist> {
    same_vocab(p, q)?;
    let diff: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = diff.iter().sum();
    if mass <= 0.0 {
        return Ok(p.clone());
    }
    Ok(ProbDist::renormalized(diff, mass))
}

/// Result of running the accept/resample step on one drafted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Accepted(TokenId),
    Resampled(TokenId),
}

impl StepResult {
    pub fn token(self) -> TokenId {
        match self {
            StepResult::Accepted(t) | StepResult::Resampled(t) => t,
        }
    }
}

/// One speculative-sampling step: accept `x` with [`accept_prob`], otherwise
/// draw from [`residual`]. Consumes one uniform, plus one more on rejection.
pub fn speculative_step<R: UniformSource + ?Sized>(
    p: &ProbDist,
    q: &ProbDist,
    x: TokenId,
    rng: &mut R,
) -> Result<StepResult> {
    let a = accept_prob(p, q, x)?;
    if rng.next_uniform() < a {
        Ok(StepResult::Accepted(x))
    } else {
        Ok(StepResult::Resampled(sample(&residual(p, q)?, rng)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{ScriptedDraws, SeededRng, Stream};
    use proptest::prelude::*;

    fn d(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn construction_rules() {
        assert!(ProbDist::new(vec![1.0]).is_err());
        assert!(ProbDist::new(vec![0.5, -0.1, 0.6]).is_err());
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        let near = ProbDist::new(vec![0.5, 0.5 + 5e-7]).unwrap();
        assert!((near.probs().iter().sum::<f64>() - 1.0).abs() < SUM_TOLERANCE);
        assert!(ProbDist::from_weights(vec![0.0, 0.0]).is_err());
        assert_eq!(ProbDist::from_weights(vec![1.0, 3.0]).unwrap().probs(), &[0.25, 0.75]);
    }

    #[test]
    fn argmax_lowest_id_wins_ties() {
        assert_eq!(d(&[0.25, 0.375, 0.375]).argmax(), 1);
        assert_eq!(d(&[0.5, 0.5]).argmax(), 0);
    }

    #[test]
    fn degenerate_sample() {
        let mut rng = SeededRng::new(3, Stream::Custom(1));
        let dist = d(&[1.0, 0.0]);
        for _ in 0..1000 {
            assert_eq!(sample(&dist, &mut rng), 0);
        }
    }

    #[test]
    fn fair_coin_frequency() {
        // Binomial(1e5, 0.5): sd = 0.00158, so [0.49, 0.51] is over 6 sd wide.
        let mut rng = SeededRng::new(11, Stream::Custom(2));
        let dist = d(&[0.5, 0.5]);
        let zeros = (0..100_000).filter(|_| sample(&dist, &mut rng) == 0).count();
        let freq = zeros as f64 / 100_000.0;
        assert!((0.49..=0.51).contains(&freq), "freq {freq}");
    }

    #[test]
    fn fixed_seed_reproduces() {
        let dist = d(&[0.3, 0.7]);
        let run = || {
            let mut rng = SeededRng::new(42, Stream::Draft);
            (0..50).map(|_| sample(&dist, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sample_consumes_one_draw() {
        let mut a = SeededRng::new(5, Stream::Custom(3));
        let mut b = a.clone();
        sample(&d(&[0.2, 0.3, 0.5]), &mut a);
        b.next_uniform();
        assert_eq!(a.next_uniform(), b.next_uniform());
    }

    #[test]
    fn accept_prob_branches() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.25, 0.75]);
        assert_eq!(accept_prob(&p, &q, 0).unwrap(), 1.0);

        let p = d(&[0.2, 0.8]);
        let q = d(&[0.4, 0.6]);
        assert_eq!(accept_prob(&p, &q, 0).unwrap(), 0.5);

        let p = d(&[0.0, 1.0]);
        let q = d(&[0.4, 0.6]);
        assert_eq!(accept_prob(&p, &q, 0).unwrap(), 0.0);

        let p = d(&[0.3, 0.7]);
        let q = d(&[0.0, 1.0]);
        assert_eq!(accept_prob(&p, &q, 0).unwrap(), 1.0);
    }

    #[test]
    fn accept_prob_errors() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.2, 0.3, 0.5]);
        assert!(matches!(accept_prob(&p, &q, 0), Err(Error::VocabMismatch { .. })));
        assert!(matches!(accept_prob(&p, &p, 2), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).unwrap().probs(), &[0.0, 1.0]);
        assert_eq!(
            residual(&d(&[0.25, 0.25, 0.5]), &d(&[0.5, 0.25, 0.25]))
                .unwrap()
                .probs(),
            &[0.0, 0.0, 1.0]
        );
        assert_eq!(residual(&d(&[0.5, 0.5]), &d(&[0.5, 0.5])).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn pinned_rejection_trace() {
        // a = 0.2 / 0.4 = 0.5; u = 0.6 rejects, residual is [0, 1] -> token 1.
        let p = d(&[0.2, 0.8]);
        let q = d(&[0.4, 0.6]);
        let mut draws = ScriptedDraws::new(vec![0.6, 0.1]);
        assert_eq!(
            speculative_step(&p, &q, 0, &mut draws).unwrap(),
            StepResult::Resampled(1)
        );
        let mut draws = ScriptedDraws::new(vec![0.4]);
        assert_eq!(
            speculative_step(&p, &q, 0, &mut draws).unwrap(),
            StepResult::Accepted(0)
        );
    }

    fn dist_strategy(v: usize) -> impl Strategy<Value = ProbDist> {
        prop::collection::vec(0.0f64..1.0, v).prop_filter_map("mass", |w| ProbDist::from_weights(w).ok())
    }

    fn pair_strategy() -> impl Strategy<Value = (ProbDist, ProbDist)> {
        (2usize..=6).prop_flat_map(|v| (dist_strategy(v), dist_strategy(v)))
    }

    /// Law of the emitted token, enumerated branch by branch.
    fn emitted_law(p: &ProbDist, q: &ProbDist) -> Vec<f64> {
        let v = p.vocab();
        let res = residual(p, q).unwrap();
        let mut law = vec![0.0; v];
        for x in 0..v {
            let a = accept_prob(p, q, x as TokenId).unwrap();
            let qx = q.probs()[x];
            law[x] += qx * a;
            for (y, r) in res.probs().iter().enumerate() {
                law[y] += qx * (1.0 - a) * r;
            }
        }
        law
    }

    proptest! {
        #[test]
        fn one_step_law_equals_target((p, q) in pair_strategy()) {
            let law = emitted_law(&p, &q);
            for (a, b) in law.iter().zip(p.probs()) {
                prop_assert!((a - b).abs() < 1e-12, "{law:?} vs {:?}", p.probs());
            }
        }

        #[test]
        fn residual_is_valid_when_p_exceeds_q((p, q) in pair_strategy()) {
            let r = residual(&p, &q).unwrap();
            prop_assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < SUM_TOLERANCE);
            prop_assert!(r.probs().iter().all(|x| *x >= 0.0));
            if p.probs().iter().zip(q.probs()).any(|(a, b)| a > b) {
                for (i, ri) in r.probs().iter().enumerate() {
                    if p.probs()[i] <= q.probs()[i] {
                        prop_assert_eq!(*ri, 0.0);
                    }
                }
            }
        }

        #[test]
        fn accept_prob_is_pure((p, q) in pair_strategy(), x in 0u32..2) {
            let a = accept_prob(&p, &q, x).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, accept_prob(&p, &q, x).unwrap());
        }
    }
}
