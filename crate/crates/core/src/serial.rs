//! Classic draft-then-verify speculative decoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{DecodeMode, ModelOracle};
use crate::prob::{accept_prob, residual, sample, ProbDist, TokenId};
use crate::rng::{DrawSource, RunStreams, UniformSource};

/// γ drafted tokens and the draft distributions they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftBatch {
    pub tokens: Vec<TokenId>,
    pub dists: Vec<ProbDist>,
}

impl DraftBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() != self.dists.len() {
            return Err(Error::param(
                "batch",
                format!("{} tokens with {} distributions", self.tokens.len(), self.dists.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtraKind {
    Correction,
    Bonus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub accepted_count: usize,
    /// Accepted run followed by the correction or bonus token.
    pub emitted: Vec<TokenId>,
    pub extra_kind: ExtraKind,
}

/// Draft token for absolute position `position` given the full context.
pub(crate) fn draft_one<M, D>(model: &M, context: &[TokenId], draws: &D, mode: DecodeMode) -> (TokenId, ProbDist)
where
    M: ModelOracle + ?Sized,
    D: DrawSource,
{
    let q = model.next_dist(context);
    let token = mode.pick(&q, draws, context.len());
    (token, q)
}

/// Extends `prefix` autoregressively `gamma` times with the draft model.
pub fn draft<M, D>(model: &M, prefix: &[TokenId], gamma: usize, draws: &D, mode: DecodeMode) -> Result<DraftBatch>
where
    M: ModelOracle + ?Sized,
    D: DrawSource,
{
    if gamma == 0 {
        return Err(Error::param("gamma", "must be at least 1"));
    }
    let mut ctx = prefix.to_vec();
    let mut batch = DraftBatch {
        tokens: Vec::with_capacity(gamma),
        dists: Vec::with_capacity(gamma),
    };
    for _ in 0..gamma {
        let (t, q) = draft_one(model, &ctx, draws, mode);
        ctx.push(t);
        batch.tokens.push(t);
        batch.dists.push(q);
    }
    Ok(batch)
}

/// What a verification pass decided, before any bonus policy is applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Verdict {
    pub accepted: usize,
    /// Correction token on rejection, bonus token on full acceptance when
    /// one was requested, otherwise `None`.
    pub extra: Option<(TokenId, ExtraKind)>,
}

/// Outcome of checking one drafted token against its target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Judged {
    Keep,
    Replace(TokenId),
}

/// Accept/reject a single drafted token `x` at sequence position `pos`.
///
/// Greedy keeps `x` iff it is the target argmax. Stochastic draws from
/// `draws.at(pos)`: the first uniform decides acceptance, the second feeds
/// the residual.
pub(crate) fn judge<D: DrawSource>(
    p: &ProbDist,
    q: &ProbDist,
    x: TokenId,
    draws: &D,
    pos: usize,
    mode: DecodeMode,
) -> Result<Judged> {
    if p.vocab() != q.vocab() {
        return Err(Error::VocabMismatch {
            left: p.vocab(),
            right: q.vocab(),
        });
    }
    match mode {
        DecodeMode::Greedy => {
            let best = p.argmax();
            Ok(if x == best { Judged::Keep } else { Judged::Replace(best) })
        }
        DecodeMode::Stochastic => {
            let mut s = draws.at(pos);
            if s.next_uniform() < accept_prob(p, q, x)? {
                Ok(Judged::Keep)
            } else {
                Ok(Judged::Replace(sample(&residual(p, q)?, &mut s)))
            }
        }
    }
}

/// Verifies `tokens` (drafted from `dists`) against the target.
///
/// On full acceptance also returns the target distribution for the next
/// position, and a bonus token drawn from it when `with_bonus` is set. A
/// bonus uses the first uniform of its own position.
pub(crate) fn verify_tokens<M, D>(
    target: &M,
    prefix: &[TokenId],
    tokens: &[TokenId],
    dists: &[ProbDist],
    draws: &D,
    mode: DecodeMode,
    with_bonus: bool,
) -> Result<(Verdict, Option<ProbDist>)>
where
    M: ModelOracle + ?Sized,
    D: DrawSource,
{
    let mut ctx = prefix.to_vec();
    for (i, (&x, q)) in tokens.iter().zip(dists).enumerate() {
        let p = target.next_dist(&ctx);
        if let Judged::Replace(fix) = judge(&p, q, x, draws, ctx.len(), mode)? {
            return Ok((
                Verdict {
                    accepted: i,
                    extra: Some((fix, ExtraKind::Correction)),
                },
                None,
            ));
        }
        ctx.push(x);
    }
    let next = target.next_dist(&ctx);
    let extra = with_bonus.then(|| (mode.pick(&next, draws, ctx.len()), ExtraKind::Bonus));
    Ok((
        Verdict {
            accepted: tokens.len(),
            extra,
        },
        Some(next),
    ))
}

/// One target pass over a drafted batch. Always emits exactly one extra token.
pub fn verify<M, D>(
    target: &M,
    prefix: &[TokenId],
    batch: &DraftBatch,
    draws: &D,
    mode: DecodeMode,
) -> Result<VerifyOutcome>
where
    M: ModelOracle + ?Sized,
    D: DrawSource,
{
    batch.validate()?;
    let (v, _) = verify_tokens(target, prefix, &batch.tokens, &batch.dists, draws, mode, true)?;
    let (extra, extra_kind) = v.extra.expect("bonus requested");
    let mut emitted = batch.tokens[..v.accepted].to_vec();
    emitted.push(extra);
    Ok(VerifyOutcome {
        accepted_count: v.accepted,
        emitted,
        extra_kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundKind {
    /// Draft then verify, no overlap.
    Serial,
    /// Verification overlapped with drafting the next batch.
    Optimistic,
    /// First draft token verified while the rest are drafted.
    Conservative,
    /// Verification of the remainder after an accepted conservative round.
    Standard,
}

/// One verification round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub kind: RoundKind,
    /// Draft tokens put up for verification.
    pub gamma_used: usize,
    pub accepted_count: usize,
    /// Tokens committed by this round after final truncation.
    pub emitted: usize,
    pub extra: Option<ExtraKind>,
}

impl RoundRecord {
    pub fn fully_accepted(&self) -> bool {
        self.accepted_count == self.gamma_used
    }

    /// Tokens the round produced before any final truncation.
    pub fn produced(&self) -> usize {
        self.accepted_count + usize::from(self.extra.is_some())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLog {
    pub rounds: Vec<RoundRecord>,
}

impl RoundLog {
    pub fn tokens_emitted(&self) -> usize {
        self.rounds.iter().map(|r| r.emitted).sum()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.rounds {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("<round log>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut rounds = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<round log>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            rounds.push(serde_json::from_str(&line)?);
        }
        Ok(Self { rounds })
    }
}

/// Draft γ, verify, commit, repeat until `max_new` tokens exist. Surplus from
/// the last round is dropped after logging.
pub fn run_serial_sd<Md, Mt>(
    draft_m: &Md,
    target_m: &Mt,
    prompt: &[TokenId],
    gamma: usize,
    max_new: usize,
    mode: DecodeMode,
    streams: &RunStreams,
) -> Result<(Vec<TokenId>, RoundLog)>
where
    Md: ModelOracle + ?Sized,
    Mt: ModelOracle + ?Sized,
{
    if max_new == 0 {
        return Err(Error::param("max_new", "must be at least 1"));
    }
    if draft_m.vocab() != target_m.vocab() {
        return Err(Error::VocabMismatch {
            left: draft_m.vocab(),
            right: target_m.vocab(),
        });
    }
    let mut seq = prompt.to_vec();
    let mut log = RoundLog::default();
    while seq.len() - prompt.len() < max_new {
        let batch = draft(draft_m, &seq, gamma, &streams.draft, mode)?;
        let out = verify(target_m, &seq, &batch, &streams.verifier, mode)?;
        let room = max_new - (seq.len() - prompt.len());
        let take = out.emitted.len().min(room);
        seq.extend_from_slice(&out.emitted[..take]);
        log.rounds.push(RoundRecord {
            round: log.rounds.len() + 1,
            kind: RoundKind::Serial,
            gamma_used: gamma,
            accepted_count: out.accepted_count,
            emitted: take,
            extra: Some(out.extra_kind),
        });
    }
    Ok((seq.split_off(prompt.len()), log))
}
