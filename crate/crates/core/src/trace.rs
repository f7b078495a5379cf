//! Worker timelines produced by the parallel scheduler.
//!
//! Times are virtual ticks: one profile time unit is [`TICKS_PER_UNIT`] ticks.
//! Integer ticks keep interval arithmetic exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::RoundRecord;

pub const TICKS_PER_UNIT: f64 = 1e9;

pub type Ticks = u64;

pub fn to_ticks(units: f64) -> Ticks {
    (units * TICKS_PER_UNIT).round() as Ticks
}

pub fn to_units(ticks: Ticks) -> f64 {
    ticks as f64 / TICKS_PER_UNIT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Worker {
    Draft,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Prune,
    Prefill,
    DecodeOne,
    VerifyBatch,
    /// Zero-length marker: in-flight drafting cancelled at this instant.
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub worker: Worker,
    pub action: Action,
    pub virtual_start: Ticks,
    pub virtual_end: Ticks,
    /// Round the work belongs to; 0 for prefill.
    pub round: usize,
}

impl TraceEvent {
    pub fn duration(&self) -> Ticks {
        self.virtual_end - self.virtual_start
    }
}

/// Timeline of both workers plus the per-round verification records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub events: Vec<TraceEvent>,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Event(TraceEvent),
    Round(RoundRecord),
}

impl ScheduleTrace {
    pub fn worker_events(&self, worker: Worker) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.worker == worker)
    }

    /// Per-worker events are ordered and non-overlapping; the target runs one
    /// verify batch per round.
    pub fn validate(&self) -> Result<()> {
        for w in [Worker::Draft, Worker::Target] {
            let mut last_end = 0;
            for e in self.worker_events(w) {
                if e.virtual_end < e.virtual_start || e.virtual_start < last_end {
                    return Err(Error::MalformedTrace {
                        round: e.round,
                        reason: format!("{w:?} event {:?} overlaps or runs backwards", e.action),
                    });
                }
                last_end = e.virtual_end;
            }
        }
        for r in &self.rounds {
            let verifies = self
                .worker_events(Worker::Target)
                .filter(|e| e.action == Action::VerifyBatch && e.round == r.round)
                .count();
            if verifies != 1 {
                return Err(Error::MalformedTrace {
                    round: r.round,
                    reason: format!("{verifies} verify batches"),
                });
            }
        }
        Ok(())
    }

    /// Total target idle time between the end of its prefill and its last event.
    pub fn target_idle_after_prefill(&self) -> Ticks {
        let mut idle = 0;
        let mut cursor = None;
        for e in self.worker_events(Worker::Target) {
            if let Some(end) = cursor {
                idle += e.virtual_start.saturating_sub(end);
            }
            cursor = Some(e.virtual_end);
        }
        idle
    }

    /// Events first, then rounds, one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<trace>", e);
        for e in &self.events {
            serde_json::to_writer(&mut out, &Line::Event(e.clone()))?;
            out.write_all(b"\n").map_err(io)?;
        }
        for r in &self.rounds {
            serde_json::to_writer(&mut out, &Line::Round(r.clone()))?;
            out.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut trace = ScheduleTrace::default();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                Line::Event(e) => trace.events.push(e),
                Line::Round(r) => trace.rounds.push(r),
            }
        }
        Ok(trace)
    }

    /// Two-row text timeline, `width` characters wide.
    ///
    /// `P` prune, `=` prefill, `d` draft decode, `V` verify, `x` abort, `.` idle.
    pub fn render_timeline(&self, width: usize) -> String {
        let width = width.max(10);
        let end = self.events.iter().map(|e| e.virtual_end).max().unwrap_or(0).max(1);
        let cell = |t: Ticks| ((t as u128 * width as u128) / end as u128) as usize;
        let mut out = String::new();
        for (w, name) in [(Worker::Draft, "draft "), (Worker::Target, "target")] {
            let mut row = vec!['.'; width];
            for e in self.worker_events(w) {
                let glyph = match e.action {
                    Action::Prune => 'P',
                    Action::Prefill => '=',
                    Action::DecodeOne => 'd',
                    Action::VerifyBatch => 'V',
                    Action::Abort => 'x',
                };
                let a = cell(e.virtual_start).min(width - 1);
                let b = cell(e.virtual_end).max(a + 1).min(width);
                for c in &mut row[a..b] {
                    if e.action == Action::Abort || *c == '.' {
                        *c = glyph;
                    }
                }
            }
            let _ = writeln!(out, "{name} |{}|", row.into_iter().collect::<String>());
        }
        let _ = writeln!(out, "        0{:>w$}", format!("{:.3}", to_units(end)), w = width);
        out
    }
}
