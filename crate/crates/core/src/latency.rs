//! Virtual-clock cost model.
//!
//! Turns round logs and worker timelines into wall time, speedup against
//! plain autoregressive decoding, mean accepted tokens and a per-phase
//! time breakdown.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::{RoundLog, RoundRecord};
use crate::trace::{to_ticks, to_units, Action, ScheduleTrace, Ticks, Worker};

/// Per-phase timing, in abstract time units (seconds when the caller says so).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub t_draft_prefill: f64,
    pub t_target_prefill: f64,
    /// One draft forward pass.
    pub t_draft_decode: f64,
    /// One target forward pass over a verification batch.
    pub t_target_verify: f64,
    /// One-time token pruning.
    pub t_prune: f64,
}

impl Default for LatencyProfile {
    /// Prefill figures from a 7B/72B video model pair; decode ratio 3:1.
    fn default() -> Self {
        Self {
            t_draft_prefill: 0.2,
            t_target_prefill: 0.8,
            t_draft_decode: 0.05,
            t_target_verify: 0.15,
            t_prune: 0.0,
        }
    }
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_draft_prefill", self.t_draft_prefill),
            ("t_target_prefill", self.t_target_prefill),
            ("t_draft_decode", self.t_draft_decode),
            ("t_target_verify", self.t_target_verify),
            ("t_prune", self.t_prune),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(name, format!("{v} must be finite and >= 0")));
            }
        }
        if self.t_target_verify <= 0.0 {
            return Err(Error::param("t_target_verify", "must be > 0"));
        }
        Ok(())
    }

    pub(crate) fn ticks(&self) -> ProfileTicks {
        ProfileTicks {
            draft_prefill: to_ticks(self.t_draft_prefill),
            target_prefill: to_ticks(self.t_target_prefill),
            draft_decode: to_ticks(self.t_draft_decode),
            target_verify: to_ticks(self.t_target_verify),
            prune: to_ticks(self.t_prune),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ProfileTicks {
    pub draft_prefill: Ticks,
    pub target_prefill: Ticks,
    pub draft_decode: Ticks,
    pub target_verify: Ticks,
    pub prune: Ticks,
}

/// Speedup of one serial round: `(accepted + 1) · T_target / (γ · T_draft + T_target)`.
pub fn round_speedup(profile: &LatencyProfile, gamma: usize, accepted: usize) -> Result<f64> {
    if accepted > gamma {
        return Err(Error::param("accepted", format!("{accepted} > gamma {gamma}")));
    }
    let t = profile.t_target_verify;
    Ok((accepted + 1) as f64 * t / (gamma as f64 * profile.t_draft_decode + t))
}

/// Draft tokens that fit in the target's extra prefill time:
/// `floor((T_target_prefill - T_draft_prefill) / T_draft_decode)`, at least 0.
pub fn prefill_buffer(profile: &LatencyProfile) -> Result<usize> {
    let t = profile.ticks();
    if t.draft_decode == 0 {
        return Err(Error::param("t_draft_decode", "must be > 0"));
    }
    Ok((t.target_prefill.saturating_sub(t.draft_prefill) / t.draft_decode) as usize)
}

/// Rows of the time breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    TargetPrefill,
    TargetDecode,
    DraftPrefill,
    DraftDecode,
    Prune,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::TargetPrefill,
        Phase::TargetDecode,
        Phase::DraftPrefill,
        Phase::DraftDecode,
        Phase::Prune,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phase::TargetPrefill => "Target Model Prefilling",
            Phase::TargetDecode => "Target Model Decoding",
            Phase::DraftPrefill => "Draft Model Prefilling",
            Phase::DraftDecode => "Draft Model Decoding",
            Phase::Prune => "Video Token Pruning",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Time a phase adds to the critical path (`charged`) versus time its
/// worker was busy with it (`busy`). They differ when work is overlapped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub charged: f64,
    pub busy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub total_time: f64,
    pub ar_baseline_time: f64,
    /// End-to-end: `ar_baseline_time / total_time`.
    pub speedup: f64,
    /// Time after prefill.
    pub decode_time: f64,
    pub ar_decode_time: f64,
    /// Decoding only: `ar_decode_time / decode_time`.
    pub decode_speedup: f64,
    /// Mean length of acceptance runs across consecutive fully accepted rounds.
    pub mat: f64,
    /// Mean tokens produced per verification round.
    pub mat_per_round: f64,
    pub tokens_emitted: usize,
    pub rounds: usize,
    pub breakdown: BTreeMap<Phase, PhaseTime>,
    /// Critical-path time with neither worker busy.
    pub idle: f64,
}

impl RunMetrics {
    /// Appendix-style breakdown table.
    pub fn write_breakdown_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_breakdown_csv(out, &self.breakdown, self.total_time)
    }
}

/// Breakdown table: one row per phase, then the total.
pub fn write_breakdown_csv<W: Write>(
    mut out: W,
    breakdown: &BTreeMap<Phase, PhaseTime>,
    total: f64,
) -> std::io::Result<()> {
    writeln!(out, "{}", crate::CSV_VERSION)?;
    writeln!(out, "operation,charged,busy,overlapped")?;
    for p in Phase::ALL {
        let t = breakdown.get(&p).copied().unwrap_or_default();
        let overlapped = t.busy > 0.0 && t.charged < t.busy;
        writeln!(out, "{},{},{},{}", p.label(), t.charged, t.busy, overlapped)?;
    }
    writeln!(out, "Total Latency,{total},{total},false")
}

/// How a round log's phases combine in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Charging {
    /// Draft and target alternate; every phase adds up.
    Serial,
    /// Each interval costs the longer of its draft and target work.
    Overlapped,
}

/// Input to [`simulate`].
#[derive(Debug, Clone, Copy)]
pub enum TraceRef<'a> {
    Rounds(&'a RoundLog, Charging),
    Schedule(&'a ScheduleTrace),
}

pub fn simulate(trace: TraceRef<'_>, profile: &LatencyProfile) -> Result<RunMetrics> {
    match trace {
        TraceRef::Rounds(log, charging) => simulate_rounds(log, profile, charging),
        TraceRef::Schedule(t) => simulate_schedule(t, profile),
    }
}

fn check_rounds(rounds: &[RoundRecord]) -> Result<()> {
    for (i, r) in rounds.iter().enumerate() {
        let bad = |reason: String| Error::MalformedTrace { round: r.round, reason };
        if r.round != i + 1 {
            return Err(bad(format!("expected round number {}", i + 1)));
        }
        if r.gamma_used == 0 && r.extra.is_none() {
            return Err(bad("round verifies nothing and emits nothing".into()));
        }
        if r.accepted_count > r.gamma_used {
            return Err(bad(format!(
                "accepted {} of {} drafted",
                r.accepted_count, r.gamma_used
            )));
        }
        if r.emitted > r.produced() {
            return Err(bad(format!("emitted {} > produced {}", r.emitted, r.produced())));
        }
    }
    Ok(())
}

/// `(mat, mat_per_round)` from round records.
///
/// A run accumulates produced tokens over consecutive fully accepted rounds
/// and closes with the first round containing a rejection, inclusive. A
/// trailing unclosed run still counts.
pub fn acceptance_stats(rounds: &[RoundRecord]) -> (f64, f64) {
    if rounds.is_empty() {
        return (0.0, 0.0);
    }
    let mut runs = Vec::new();
    let mut open = 0usize;
    for r in rounds {
        open += r.produced();
        if !r.fully_accepted() {
            runs.push(open);
            open = 0;
        }
    }
    if open > 0 {
        runs.push(open);
    }
    let per_round = rounds.iter().map(|r| r.produced()).sum::<usize>() as f64 / rounds.len() as f64;
    let mat = runs.iter().sum::<usize>() as f64 / runs.len() as f64;
    (mat, per_round)
}

fn finish(
    total: Ticks,
    decode: Ticks,
    tokens: usize,
    rounds: &[RoundRecord],
    breakdown: BTreeMap<Phase, (Ticks, Ticks)>,
    profile: &LatencyProfile,
) -> RunMetrics {
    let pt = profile.ticks();
    let ar_decode = tokens as Ticks * pt.target_verify;
    let ar_total = pt.target_prefill + ar_decode;
    let (mat, mat_per_round) = acceptance_stats(rounds);
    let charged: Ticks = breakdown.values().map(|v| v.0).sum();
    RunMetrics {
        total_time: to_units(total),
        ar_baseline_time: to_units(ar_total),
        speedup: ratio(ar_total, total),
        decode_time: to_units(decode),
        ar_decode_time: to_units(ar_decode),
        decode_speedup: ratio(ar_decode, decode),
        mat,
        mat_per_round,
        tokens_emitted: tokens,
        rounds: rounds.len(),
        breakdown: breakdown
            .into_iter()
            .map(|(p, (c, b))| {
                (
                    p,
                    PhaseTime {
                        charged: to_units(c),
                        busy: to_units(b),
                    },
                )
            })
            .collect(),
        idle: to_units(total.saturating_sub(charged)),
    }
}

fn ratio(a: Ticks, b: Ticks) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

pub fn simulate_rounds(log: &RoundLog, profile: &LatencyProfile, charging: Charging) -> Result<RunMetrics> {
    profile.validate()?;
    check_rounds(&log.rounds)?;
    let t = profile.ticks();
    let draft_work: Vec<Ticks> = log
        .rounds
        .iter()
        .map(|r| r.gamma_used as Ticks * t.draft_decode)
        .collect();
    let draft_busy: Ticks = draft_work.iter().sum();
    let verify_busy = log.rounds.len() as Ticks * t.target_verify;

    let mut bd = BTreeMap::new();
    let (prefill, decode) = match charging {
        Charging::Serial => {
            bd.insert(Phase::Prune, (t.prune, t.prune));
            bd.insert(Phase::DraftPrefill, (t.draft_prefill, t.draft_prefill));
            bd.insert(Phase::TargetPrefill, (t.target_prefill, t.target_prefill));
            bd.insert(Phase::DraftDecode, (draft_busy, draft_busy));
            bd.insert(Phase::TargetDecode, (verify_busy, verify_busy));
            (t.prune + t.draft_prefill + t.target_prefill, draft_busy + verify_busy)
        }
        Charging::Overlapped => {
            let excess = (t.prune + t.draft_prefill).saturating_sub(t.target_prefill);
            let prune_charged = excess.min(t.prune);
            bd.insert(Phase::Prune, (prune_charged, t.prune));
            bd.insert(Phase::DraftPrefill, (excess - prune_charged, t.draft_prefill));
            bd.insert(Phase::TargetPrefill, (t.target_prefill, t.target_prefill));
            let draft_excess: Ticks = draft_work.iter().map(|w| w.saturating_sub(t.target_verify)).sum();
            bd.insert(Phase::DraftDecode, (draft_excess, draft_busy));
            bd.insert(Phase::TargetDecode, (verify_busy, verify_busy));
            (t.target_prefill + excess, verify_busy + draft_excess)
        }
    };
    Ok(finish(
        prefill + decode,
        decode,
        log.tokens_emitted(),
        &log.rounds,
        bd,
        profile,
    ))
}

/// Sorted, merged busy intervals of one worker.
fn busy_intervals(trace: &ScheduleTrace, worker: Worker, horizon: Ticks) -> Vec<(Ticks, Ticks)> {
    let mut v: Vec<(Ticks, Ticks)> = trace
        .worker_events(worker)
        .filter(|e| e.duration() > 0)
        .map(|e| (e.virtual_start.min(horizon), e.virtual_end.min(horizon)))
        .filter(|(a, b)| b > a)
        .collect();
    v.sort_unstable();
    let mut merged: Vec<(Ticks, Ticks)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

fn overlap(a: Ticks, b: Ticks, busy: &[(Ticks, Ticks)]) -> Ticks {
    busy.iter().map(|&(s, e)| e.min(b).saturating_sub(s.max(a))).sum()
}

/// Charges a parallel timeline: target work in full, draft work only where
/// the target was not busy. Draft work after the last target event is dropped.
pub fn simulate_schedule(trace: &ScheduleTrace, profile: &LatencyProfile) -> Result<RunMetrics> {
    profile.validate()?;
    trace.validate()?;
    check_rounds(&trace.rounds)?;
    let total = trace
        .worker_events(Worker::Target)
        .map(|e| e.virtual_end)
        .max()
        .ok_or(Error::MalformedTrace {
            round: 0,
            reason: "no target events".into(),
        })?;
    let target_busy = busy_intervals(trace, Worker::Target, total);
    let mut bd: BTreeMap<Phase, (Ticks, Ticks)> = Phase::ALL.iter().map(|p| (*p, (0, 0))).collect();
    let mut prefill_end = 0;
    for e in &trace.events {
        let phase = match (e.worker, e.action) {
            (_, Action::Abort) => continue,
            (Worker::Target, Action::Prefill) => {
                prefill_end = prefill_end.max(e.virtual_end);
                Phase::TargetPrefill
            }
            (Worker::Target, _) => Phase::TargetDecode,
            (Worker::Draft, Action::Prune) => Phase::Prune,
            (Worker::Draft, Action::Prefill) => Phase::DraftPrefill,
            (Worker::Draft, _) => Phase::DraftDecode,
        };
        let slot = bd.get_mut(&phase).expect("all phases present");
        slot.1 += e.duration();
        let (a, b) = (e.virtual_start.min(total), e.virtual_end.min(total));
        slot.0 += match e.worker {
            Worker::Target => b - a,
            Worker::Draft => (b - a) - overlap(a, b, &target_busy),
        };
    }
    // Overlapping draft events never happen on one worker, so charged draft
    // time is exactly the time the target sat waiting on the draft.
    Ok(finish(
        total,
        total - prefill_end,
        trace.rounds.iter().map(|r| r.emitted).sum(),
        &trace.rounds,
        bd,
        profile,
    ))
}

/// Metrics of plain autoregressive decoding: speedup is 1 by construction.
pub fn ar_metrics(tokens: usize, profile: &LatencyProfile) -> Result<RunMetrics> {
    profile.validate()?;
    let t = profile.ticks();
    let decode = tokens as Ticks * t.target_verify;
    let mut bd = BTreeMap::new();
    bd.insert(Phase::TargetPrefill, (t.target_prefill, t.target_prefill));
    bd.insert(Phase::TargetDecode, (decode, decode));
    let mut m = finish(t.target_prefill + decode, decode, tokens, &[], bd, profile);
    m.mat = 1.0;
    m.mat_per_round = 1.0;
    m.rounds = tokens;
    Ok(m)
}
