//! Parallel speculative decoding with a draft worker and a target worker.
//!
//! Both models prefill at the same time; the draft, being faster, spends the
//! rest of the target's prefill drafting a buffer of tokens. Decoding then
//! alternates between two modes:
//!
//! * **optimistic**: the target verifies the current batch while the draft
//!   speculatively drafts the next one. On full acceptance the speculative
//!   batch becomes the next batch.
//! * **conservative**: entered after a rejection. The target verifies only the
//!   first new draft token while the draft produces the rest. If that token is
//!   accepted the remainder goes through one standard round, and full
//!   acceptance there switches back to optimistic mode.
//!
//! Any rejection commits the target's correction and discards every drafted
//! token past it.
//!
//! When a target pass accepts everything it was given, its distribution for
//! the next position is already computed. It is used to check the next drafted
//! token, which takes the bonus slot of classic speculative decoding: the
//! committed token at that position is distributed exactly as the target's,
//! and the drafted tokens after it carry over. With γ = 1 a conservative pass
//! has nothing drafted ahead and draws an ordinary bonus instead.
//!
//! An optimistic pass only takes on that check when the token is already
//! drafted or the draft can finish it during the pass. Meanwhile the draft
//! keeps γ tokens ahead of whatever the pass will consume.
//!
//! Two executors share the round logic: a virtual-clock executor that emits a
//! [`ScheduleTrace`], and a threaded executor with real workers connected by
//! channels. Every draw is keyed by sequence position, so both commit the
//! same tokens as the serial decoder's verification rules imply.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{prefill_buffer, LatencyProfile, ProfileTicks};
use crate::oracle::{DecodeMode, ModelOracle};
use crate::prob::{ProbDist, TokenId};
use crate::rng::{RunStreams, SeededRng};
use crate::serial::{draft_one, judge, verify_tokens, ExtraKind, Judged, RoundKind, RoundRecord, Verdict};
use crate::trace::{Action, ScheduleTrace, Ticks, TraceEvent, Worker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedMode {
    Optimistic,
    Conservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpsdConfig {
    pub gamma: usize,
    pub max_new: usize,
    pub mode: DecodeMode,
    /// Let the draft work during verification. Turning it off changes the
    /// timeline but never the committed tokens.
    pub speculate: bool,
}

impl VpsdConfig {
    pub fn new(gamma: usize, max_new: usize, mode: DecodeMode) -> Self {
        Self {
            gamma,
            max_new,
            mode,
            speculate: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::param("gamma", "must be at least 1"));
        }
        if self.max_new == 0 {
            return Err(Error::param("max_new", "must be at least 1"));
        }
        Ok(())
    }
}

/// A drafted, not yet committed token.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainToken {
    pub token: TokenId,
    pub dist: ProbDist,
    /// Virtual time at which the draft finished it. Zero in the threaded executor.
    pub ready: Ticks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub mode: SchedMode,
    /// Prompt followed by every committed token.
    pub committed: Vec<TokenId>,
    pub prompt_len: usize,
    /// Drafted tokens extending `committed`, in order. The batch under
    /// verification is a prefix; anything after it is speculative.
    pub draft_buffer: Vec<ChainToken>,
    /// Target passes so far.
    pub round: usize,
    pub rounds: Vec<RoundRecord>,
    pub max_new: usize,
}

impl SchedulerState {
    pub fn generated(&self) -> &[TokenId] {
        &self.committed[self.prompt_len..]
    }

    pub fn is_done(&self) -> bool {
        self.generated().len() >= self.max_new
    }

    fn context(&self) -> Vec<TokenId> {
        let mut ctx = self.committed.clone();
        ctx.extend(self.draft_buffer.iter().map(|c| c.token));
        ctx
    }
}

/// How a round ends after its batch is fully accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tail {
    /// Commit the batch only; drafted tokens after it carry over.
    Nothing,
    Bonus,
    /// Check the draft token at the next position against the target.
    Check,
}

#[derive(Debug, Clone, Copy)]
struct RoundSpec {
    round: usize,
    batch_len: usize,
    /// Draft tokens to produce while the target verifies.
    concurrent: usize,
    tail: Tail,
}

struct RoundResult {
    verdict: Verdict,
    /// Tokens verified, including a checked tail token.
    verified: usize,
    /// Tokens drafted during the round, in chain order. Meaningful only when
    /// every verified token was accepted.
    drafted: Vec<ChainToken>,
}

trait Backend {
    fn prefill(&mut self, prompt: &[TokenId], buffer: usize) -> Result<Vec<ChainToken>>;

    /// Drafts `n` tokens while the target waits.
    fn draft_now(&mut self, ctx: &[TokenId], n: usize, round: usize) -> Result<Vec<ChainToken>>;

    fn run_round(&mut self, state: &SchedulerState, spec: RoundSpec) -> Result<RoundResult>;
}

struct Engine<B> {
    backend: B,
    state: SchedulerState,
    cfg: VpsdConfig,
    /// Draft tokens that fit in one target pass, at least 1.
    per_pass: usize,
}

impl<B: Backend> Engine<B> {
    fn start(mut backend: B, prompt: &[TokenId], profile: &LatencyProfile, cfg: VpsdConfig) -> Result<Self> {
        let buffer = prefill_buffer(profile)?;
        let t = profile.ticks();
        cfg.validate()?;
        let draft_buffer = backend.prefill(prompt, buffer)?;
        let mode = if draft_buffer.is_empty() {
            SchedMode::Conservative
        } else {
            SchedMode::Optimistic
        };
        Ok(Self {
            backend,
            state: SchedulerState {
                mode,
                committed: prompt.to_vec(),
                prompt_len: prompt.len(),
                draft_buffer,
                round: 0,
                rounds: Vec::new(),
                max_new: cfg.max_new,
            },
            cfg,
            per_pass: ((t.target_verify / t.draft_decode) as usize).max(1),
        })
    }

    fn top_up(&mut self, need: usize) -> Result<()> {
        let have = self.state.draft_buffer.len();
        if have < need {
            let ctx = self.state.context();
            let more = self.backend.draft_now(&ctx, need - have, self.state.round + 1)?;
            self.state.draft_buffer.extend(more);
        }
        Ok(())
    }

    /// Runs one target pass and commits its outcome. Returns the committed
    /// tokens and whether everything verified was accepted.
    fn round(
        &mut self,
        kind: RoundKind,
        batch_len: usize,
        concurrent: usize,
        tail: Tail,
    ) -> Result<(Vec<TokenId>, bool)> {
        let spec = RoundSpec {
            round: self.state.round + 1,
            batch_len,
            concurrent: if self.cfg.speculate { concurrent } else { 0 },
            tail,
        };
        let res = self.backend.run_round(&self.state, spec)?;
        let st = &mut self.state;
        st.round = spec.round;
        let mut chain = std::mem::take(&mut st.draft_buffer);
        chain.extend(res.drafted);
        let v = &res.verdict;
        let mut out: Vec<TokenId> = chain[..v.accepted].iter().map(|c| c.token).collect();
        if let Some((t, _)) = v.extra {
            out.push(t);
        }
        let full = v.accepted == res.verified;
        st.draft_buffer = if full && v.extra.is_none() {
            chain.split_off(res.verified)
        } else {
            Vec::new()
        };
        let room = st.max_new - st.generated().len();
        out.truncate(room);
        st.committed.extend_from_slice(&out);
        st.rounds.push(RoundRecord {
            round: spec.round,
            kind,
            gamma_used: res.verified,
            accepted_count: v.accepted,
            emitted: out.len(),
            extra: v.extra.map(|(_, k)| k),
        });
        Ok((out, full))
    }

    fn step_optimistic(&mut self) -> Result<Vec<TokenId>> {
        if self.state.mode != SchedMode::Optimistic {
            return Err(Error::param("mode", "optimistic step requested in conservative mode"));
        }
        let g = self.cfg.gamma;
        if self.state.draft_buffer.is_empty() {
            self.top_up(g)?;
        }
        let have = self.state.draft_buffer.len();
        let batch = g.min(have);
        // Check the next token only if it is drafted already or the draft
        // can finish it within this pass; otherwise the target would wait.
        let tail = if have > batch || batch < self.per_pass {
            Tail::Check
        } else {
            Tail::Nothing
        };
        // Draft enough to leave γ tokens once this round's are consumed.
        let consumed = batch + usize::from(tail == Tail::Check);
        let concurrent = (consumed + g).saturating_sub(have);
        let (out, full) = self.round(RoundKind::Optimistic, batch, concurrent, tail)?;
        if !full {
            self.state.mode = SchedMode::Conservative;
        }
        Ok(out)
    }

    fn step_conservative(&mut self) -> Result<Vec<TokenId>> {
        if self.state.mode != SchedMode::Conservative {
            return Err(Error::param("mode", "conservative step requested in optimistic mode"));
        }
        let g = self.cfg.gamma;
        self.top_up(1)?;
        let rest = (g - 1).saturating_sub(self.state.draft_buffer.len() - 1);
        let tail = if g == 1 { Tail::Bonus } else { Tail::Check };
        let (mut out, full) = self.round(RoundKind::Conservative, 1, rest, tail)?;
        if !full {
            return Ok(out);
        }
        // x_1 and the checked x_2 are in; x_3..x_γ remain.
        let remaining = g.saturating_sub(2);
        if remaining == 0 || self.state.is_done() {
            self.state.mode = SchedMode::Optimistic;
            return Ok(out);
        }
        self.top_up(remaining)?;
        let concurrent = (remaining + g).saturating_sub(self.state.draft_buffer.len());
        let (more, full) = self.round(RoundKind::Standard, remaining, concurrent, Tail::Check)?;
        out.extend(more);
        if full {
            self.state.mode = SchedMode::Optimistic;
        }
        Ok(out)
    }

    fn step(&mut self) -> Result<Vec<TokenId>> {
        match self.state.mode {
            SchedMode::Optimistic => self.step_optimistic(),
            SchedMode::Conservative => self.step_conservative(),
        }
    }

    fn run_to_end(&mut self) -> Result<()> {
        while !self.state.is_done() {
            self.step()?;
        }
        Ok(())
    }
}

/// Decides the tail of a fully accepted batch. `next` is the target
/// distribution after the batch, `check` the draft token at that position.
fn decide_tail<D: crate::rng::DrawSource>(
    verdict: &mut Verdict,
    next: Option<ProbDist>,
    check: Option<&ChainToken>,
    pos: usize,
    draws: &D,
    mode: DecodeMode,
) -> Result<bool> {
    let (Some(p), Some(c)) = (next, check) else {
        return Ok(false);
    };
    match judge(&p, &c.dist, c.token, draws, pos, mode)? {
        Judged::Keep => verdict.accepted += 1,
        Judged::Replace(t) => verdict.extra = Some((t, ExtraKind::Correction)),
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Virtual-clock executor

struct VirtualBackend<'a, Md: ?Sized, Mt: ?Sized> {
    draft: &'a Md,
    target: &'a Mt,
    streams: &'a RunStreams,
    mode: DecodeMode,
    t: ProfileTicks,
    draft_free: Ticks,
    target_free: Ticks,
    /// Time the last verdict became known to the draft.
    last_verdict: Ticks,
    trace: ScheduleTrace,
}

impl<Md, Mt> VirtualBackend<'_, Md, Mt>
where
    Md: ModelOracle + ?Sized,
    Mt: ModelOracle + ?Sized,
{
    fn event(&mut self, worker: Worker, action: Action, start: Ticks, end: Ticks, round: usize) {
        self.trace.events.push(TraceEvent {
            worker,
            action,
            virtual_start: start,
            virtual_end: end,
            round,
        });
    }

    /// Drafts `n` tokens back to back from `start`, recording events.
    fn draft_from(&mut self, ctx: &mut Vec<TokenId>, n: usize, start: Ticks, round: usize) -> Vec<ChainToken> {
        let mut at = start;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (token, dist) = draft_one(self.draft, ctx, &self.streams.draft, self.mode);
            ctx.push(token);
            let end = at + self.t.draft_decode;
            self.event(Worker::Draft, Action::DecodeOne, at, end, round);
            out.push(ChainToken {
                token,
                dist,
                ready: end,
            });
            at = end;
        }
        self.draft_free = at;
        out
    }

    /// Cancels draft work past `at`: later events are dropped, the one in
    /// flight is cut short. `discarded` marks finished drafts thrown away.
    fn abort_at(&mut self, at: Ticks, round: usize, discarded: bool) {
        let mut cut = discarded;
        self.trace.events.retain_mut(|e| {
            if e.worker != Worker::Draft || e.virtual_end <= at {
                return true;
            }
            cut = true;
            if e.virtual_start >= at {
                return false;
            }
            e.virtual_end = at;
            true
        });
        self.draft_free = self.draft_free.min(at);
        if cut {
            self.event(Worker::Draft, Action::Abort, at, at, round);
        }
    }
}

impl<Md, Mt> Backend for VirtualBackend<'_, Md, Mt>
where
    Md: ModelOracle + ?Sized,
    Mt: ModelOracle + ?Sized,
{
    fn prefill(&mut self, prompt: &[TokenId], buffer: usize) -> Result<Vec<ChainToken>> {
        let t = self.t;
        self.event(Worker::Target, Action::Prefill, 0, t.target_prefill, 0);
        let mut at = 0;
        if t.prune > 0 {
            self.event(Worker::Draft, Action::Prune, 0, t.prune, 0);
            at = t.prune;
        }
        self.event(Worker::Draft, Action::Prefill, at, at + t.draft_prefill, 0);
        self.target_free = t.target_prefill;
        self.last_verdict = t.target_prefill;
        let mut ctx = prompt.to_vec();
        Ok(self.draft_from(&mut ctx, buffer, at + t.draft_prefill, 0))
    }

    fn draft_now(&mut self, ctx: &[TokenId], n: usize, round: usize) -> Result<Vec<ChainToken>> {
        let start = self.draft_free.max(self.last_verdict);
        let mut ctx = ctx.to_vec();
        Ok(self.draft_from(&mut ctx, n, start, round))
    }

    fn run_round(&mut self, state: &SchedulerState, spec: RoundSpec) -> Result<RoundResult> {
        let chain = &state.draft_buffer;
        let batch = &chain[..spec.batch_len];
        let ready = batch.last().map_or(0, |c| c.ready);
        let vs = self.target_free.max(ready).max(self.last_verdict);
        let ve = vs + self.t.target_verify;
        self.event(Worker::Target, Action::VerifyBatch, vs, ve, spec.round);

        let mut ctx = state.context();
        let start = self.draft_free.max(self.last_verdict);
        let mut drafted = self.draft_from(&mut ctx, spec.concurrent, start, spec.round);

        let tokens: Vec<TokenId> = batch.iter().map(|c| c.token).collect();
        let dists: Vec<ProbDist> = batch.iter().map(|c| c.dist.clone()).collect();
        let (mut verdict, next) = verify_tokens(
            self.target,
            &state.committed,
            &tokens,
            &dists,
            &self.streams.verifier,
            self.mode,
            spec.tail == Tail::Bonus,
        )?;
        let mut decided = ve;
        let mut verified = spec.batch_len;
        if spec.tail == Tail::Check && next.is_some() {
            if chain.len() == spec.batch_len && drafted.is_empty() {
                // Nothing was drafted ahead: produce the token now.
                let start = self.draft_free.max(ve);
                drafted = self.draft_from(&mut ctx, 1, start, spec.round);
            }
            let check = chain.get(spec.batch_len).or(drafted.first());
            decided = decided.max(check.map_or(0, |c| c.ready));
            let pos = state.committed.len() + spec.batch_len;
            if decide_tail(&mut verdict, next, check, pos, &self.streams.verifier, self.mode)? {
                verified += 1;
            }
        }
        self.target_free = ve;
        self.last_verdict = decided;
        if verdict.accepted < verified || verdict.extra.is_some() {
            let discarded = chain.len() + drafted.len() > verdict.accepted;
            self.abort_at(decided, spec.round, discarded);
        }
        Ok(RoundResult {
            verdict,
            verified,
            drafted,
        })
    }
}

/// A parallel decoding session on the virtual clock.
pub struct VpsdSession<'a, Md: ?Sized, Mt: ?Sized> {
    engine: Engine<VirtualBackend<'a, Md, Mt>>,
}

/// Starts both prefills and drafts the prefill buffer.
///
/// The target prefills over `[0, t_target_prefill]`. The draft prunes, if the
/// profile charges pruning, then prefills and drafts
/// [`prefill_buffer`] tokens. A non-empty buffer starts decoding in
/// optimistic mode.
pub fn sync_prefill<'a, Md, Mt>(
    draft_m: &'a Md,
    target_m: &'a Mt,
    prompt: &[TokenId],
    profile: &LatencyProfile,
    cfg: VpsdConfig,
    streams: &'a RunStreams,
) -> Result<VpsdSession<'a, Md, Mt>>
where
    Md: ModelOracle + ?Sized,
    Mt: ModelOracle + ?Sized,
{
    profile.validate()?;
    check_vocab(draft_m, target_m)?;
    let backend = VirtualBackend {
        draft: draft_m,
        target: target_m,
        streams,
        mode: cfg.mode,
        t: profile.ticks(),
        draft_free: 0,
        target_free: 0,
        last_verdict: 0,
        trace: ScheduleTrace::default(),
    };
    Ok(VpsdSession {
        engine: Engine::start(backend, prompt, profile, cfg)?,
    })
}

impl<Md, Mt> VpsdSession<'_, Md, Mt>
where
    Md: ModelOracle + ?Sized,
    Mt: ModelOracle + ?Sized,
{
    pub fn state(&self) -> &SchedulerState {
        &self.engine.state
    }

    pub fn trace(&self) -> &ScheduleTrace {
        &self.engine.backend.trace
    }

    /// One optimistic round. Errors unless the session is in optimistic mode.
    pub fn step_optimistic(&mut self) -> Result<Vec<TokenId>> {
        self.engine.step_optimistic()
    }

    /// One conservative round, followed by the standard round for the rest
    /// of the batch when the first token is accepted.
    pub fn step_conservative(&mut self) -> Result<Vec<TokenId>> {
        self.engine.step_conservative()
    }

    /// Whichever step the current mode calls for.
    pub fn step(&mut self) -> Result<Vec<TokenId>> {
        self.engine.step()
    }

    pub fn is_done(&self) -> bool {
        self.engine.state.is_done()
    }

    /// Generated tokens and the full timeline.
    pub fn finish(self) -> (Vec<TokenId>, ScheduleTrace) {
        let Engine { backend, state, .. } = self.engine;
        let mut trace = backend.trace;
        trace.rounds = state.rounds;
        (state.committed[state.prompt_len..].to_vec(), trace)
    }
}

/// Runs parallel decoding to `cfg.max_new` tokens on the virtual clock.
pub fn run_vpsd<Md, Mt>(
    draft_m: &Md,
    target_m: &Mt,
    prompt: &[TokenId],
    cfg: VpsdConfig,
    profile: &LatencyProfile,
    streams: &RunStreams,
) -> Result<(Vec<TokenId>, ScheduleTrace)>
where
    Md: ModelOracle + ?Sized,
    Mt: ModelOracle + ?Sized,
{
    let mut s = sync_prefill(draft_m, target_m, prompt, profile, cfg, streams)?;
    s.engine.run_to_end()?;
    Ok(s.finish())
}

fn check_vocab<Md, Mt>(d: &Md, t: &Mt) -> Result<()>
where
    Md: ModelOracle + ?Sized,
    Mt: ModelOracle + ?Sized,
{
    if d.vocab() != t.vocab() {
        return Err(Error::VocabMismatch {
            left: d.vocab(),
            right: t.vocab(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Threaded executor

/// Options for [`run_vpsd_threaded`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadedOptions {
    /// Wall-clock seconds per profile time unit. Workers sleep for their
    /// profile cost when set, which makes cancellation observable.
    pub time_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreadedRun {
    pub tokens: Vec<TokenId>,
    pub rounds: Vec<RoundRecord>,
    /// Draft jobs cancelled by a rejection.
    pub aborts: usize,
    /// Drafted tokens thrown away, whether cancelled or discarded.
    pub discarded: usize,
}

struct DraftJob {
    id: u64,
    ctx: Vec<TokenId>,
    count: usize,
    cancel: Arc<AtomicBool>,
}

enum DraftMsg {
    Token { id: u64, token: ChainToken },
    Done { id: u64 },
}

struct VerifyJob {
    prefix: Vec<TokenId>,
    tokens: Vec<TokenId>,
    dists: Vec<ProbDist>,
    with_bonus: bool,
}

type VerifyReply = Result<(Verdict, Option<ProbDist>)>;

struct ThreadBackend {
    to_draft: Sender<DraftJob>,
    from_draft: Receiver<DraftMsg>,
    to_target: Sender<VerifyJob>,
    from_target: Receiver<VerifyReply>,
    verifier: SeededRng,
    mode: DecodeMode,
    next_job: u64,
    aborts: usize,
    discarded: usize,
}

fn worker_gone() -> Error {
    Error::Worker("worker thread stopped".into())
}

impl ThreadBackend {
    fn submit(&mut self, ctx: Vec<TokenId>, count: usize) -> Result<(u64, Arc<AtomicBool>)> {
        self.next_job += 1;
        let cancel = Arc::new(AtomicBool::new(false));
        self.to_draft
            .send(DraftJob {
                id: self.next_job,
                ctx,
                count,
                cancel: cancel.clone(),
            })
            .map_err(|_| worker_gone())?;
        Ok((self.next_job, cancel))
    }

    /// Next token of job `id`, or `None` once the job is done.
    fn recv_token(&mut self, id: u64) -> Result<Option<ChainToken>> {
        loop {
            match self.from_draft.recv().map_err(|_| worker_gone())? {
                DraftMsg::Token { id: j, token } if j == id => return Ok(Some(token)),
                DraftMsg::Done { id: j } if j == id => return Ok(None),
                _ => {}
            }
        }
    }

    fn collect(&mut self, id: u64, into: &mut Vec<ChainToken>) -> Result<()> {
        while let Some(t) = self.recv_token(id)? {
            into.push(t);
        }
        Ok(())
    }
}

impl Backend for ThreadBackend {
    fn prefill(&mut self, prompt: &[TokenId], buffer: usize) -> Result<Vec<ChainToken>> {
        if buffer == 0 {
            return Ok(Vec::new());
        }
        self.draft_now(prompt, buffer, 0)
    }

    fn draft_now(&mut self, ctx: &[TokenId], n: usize, _round: usize) -> Result<Vec<ChainToken>> {
        let (id, _) = self.submit(ctx.to_vec(), n)?;
        let mut out = Vec::with_capacity(n);
        self.collect(id, &mut out)?;
        Ok(out)
    }

    fn run_round(&mut self, state: &SchedulerState, spec: RoundSpec) -> Result<RoundResult> {
        let chain = &state.draft_buffer;
        let batch = &chain[..spec.batch_len];
        self.to_target
            .send(VerifyJob {
                prefix: state.committed.clone(),
                tokens: batch.iter().map(|c| c.token).collect(),
                dists: batch.iter().map(|c| c.dist.clone()).collect(),
                with_bonus: spec.tail == Tail::Bonus,
            })
            .map_err(|_| worker_gone())?;
        let job = if spec.concurrent > 0 {
            Some(self.submit(state.context(), spec.concurrent)?)
        } else {
            None
        };
        let (mut verdict, next) = self.from_target.recv().map_err(|_| worker_gone())??;
        let mut drafted = Vec::new();
        let mut verified = spec.batch_len;
        if spec.tail == Tail::Check && next.is_some() {
            if chain.len() == spec.batch_len {
                match &job {
                    Some((id, _)) => {
                        let id = *id;
                        if let Some(t) = self.recv_token(id)? {
                            drafted.push(t);
                        }
                    }
                    None => drafted = self.draft_now(&state.context(), 1, spec.round)?,
                }
            }
            let check = chain.get(spec.batch_len).or(drafted.first());
            let pos = state.committed.len() + spec.batch_len;
            if decide_tail(&mut verdict, next, check, pos, &self.verifier, self.mode)? {
                verified += 1;
            }
        }
        let rejected = verdict.accepted < verified || verdict.extra.is_some();
        if let Some((id, cancel)) = job {
            if rejected {
                cancel.store(true, Ordering::SeqCst);
                self.aborts += 1;
            }
            self.collect(id, &mut drafted)?;
        }
        if rejected {
            self.discarded += (chain.len() + drafted.len()).saturating_sub(verdict.accepted);
        }
        Ok(RoundResult {
            verdict,
            verified,
            drafted,
        })
    }
}

fn pace(scale: Option<f64>, units: f64) {
    if let Some(s) = scale {
        let secs = s * units;
        if secs > 0.0 {
            thread::sleep(Duration::from_secs_f64(secs));
        }
    }
}

/// Runs parallel decoding with a real draft thread and target thread.
///
/// The coordinator owns the committed sequence. Drafting is cancelled between
/// single-token steps as soon as a rejection is known. The committed tokens
/// match [`run_vpsd`] for the same inputs.
pub fn run_vpsd_threaded<Md, Mt>(
    draft_m: &Md,
    target_m: &Mt,
    prompt: &[TokenId],
    cfg: VpsdConfig,
    profile: &LatencyProfile,
    streams: &RunStreams,
    opts: ThreadedOptions,
) -> Result<ThreadedRun>
where
    Md: ModelOracle + Sync + ?Sized,
    Mt: ModelOracle + Sync + ?Sized,
{
    profile.validate()?;
    cfg.validate()?;
    check_vocab(draft_m, target_m)?;
    let (to_draft, draft_jobs) = channel::<DraftJob>();
    let (draft_out, from_draft) = channel::<DraftMsg>();
    let (to_target, target_jobs) = channel::<VerifyJob>();
    let (target_out, from_target) = channel::<VerifyReply>();
    let scale = opts.time_scale;
    let p = *profile;

    thread::scope(|s| {
        let draft_streams = streams.draft.clone();
        s.spawn(move || {
            pace(scale, p.t_prune + p.t_draft_prefill);
            for job in draft_jobs {
                let mut ctx = job.ctx;
                for _ in 0..job.count {
                    if job.cancel.load(Ordering::SeqCst) {
                        break;
                    }
                    pace(scale, p.t_draft_decode);
                    let (token, dist) = draft_one(draft_m, &ctx, &draft_streams, cfg.mode);
                    ctx.push(token);
                    let msg = DraftMsg::Token {
                        id: job.id,
                        token: ChainToken { token, dist, ready: 0 },
                    };
                    if draft_out.send(msg).is_err() {
                        return;
                    }
                }
                if draft_out.send(DraftMsg::Done { id: job.id }).is_err() {
                    return;
                }
            }
        });
        let verifier = streams.verifier.clone();
        s.spawn(move || {
            pace(scale, p.t_target_prefill);
            for job in target_jobs {
                pace(scale, p.t_target_verify);
                let reply = verify_tokens(
                    target_m,
                    &job.prefix,
                    &job.tokens,
                    &job.dists,
                    &verifier,
                    cfg.mode,
                    job.with_bonus,
                );
                if target_out.send(reply).is_err() {
                    return;
                }
            }
        });
        let backend = ThreadBackend {
            to_draft,
            from_draft,
            to_target,
            from_target,
            verifier: streams.verifier.clone(),
            mode: cfg.mode,
            next_job: 0,
            aborts: 0,
            discarded: 0,
        };
        let mut engine = Engine::start(backend, prompt, profile, cfg)?;
        engine.run_to_end()?;
        let Engine { backend, state, .. } = engine;
        // Dropping the backend closes the job channels and ends both workers.
        let (aborts, discarded) = (backend.aborts, backend.discarded);
        drop(backend);
        Ok(ThreadedRun {
            tokens: state.committed[state.prompt_len..].to_vec(),
            rounds: state.rounds,
            aborts,
            discarded,
        })
    })
}
