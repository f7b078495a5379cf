//! Experiment configuration, end-to-end runs and parameter sweeps.
//!
//! Configuration files are flat `key = value` lines; `#` starts a comment.
//! Unknown keys are errors. See [`ExperimentConfig::KEYS`] for the schema.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias::{bias_report, BandSides};
use crate::error::{Error, Result};
use crate::latency::{
    ar_metrics, simulate_rounds, simulate_schedule, write_breakdown_csv, Charging, LatencyProfile, Phase, PhaseTime,
    RunMetrics,
};
use crate::oracle::{generate_ar, DecodeMode};
use crate::preserve::{fuse_and_select, CrossAttentionInputs, RawScores, VisualTokenGrid};
use crate::prob::TokenId;
use crate::rng::{mix64, RunStreams};
use crate::schedule::{run_vpsd, VpsdConfig};
use crate::serial::{run_serial_sd, RoundLog};
use crate::sim::{make_pair, make_synthetic_grid, random_contexts, Scenario, SceneParams, TableOracle};
use crate::tensor_io::{read_grid, read_xattn};
use crate::trace::{to_ticks, Action, ScheduleTrace, TraceEvent, Worker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Target model alone.
    Ar,
    /// Draft then verify, one after the other.
    SerialSd,
    /// Draft and target in parallel.
    Vpsd,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Ar => "ar",
            Method::SerialSd => "serial_sd",
            Method::Vpsd => "vpsd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub gamma: usize,
    pub keep_ratio: f64,
    pub crop_side: usize,
    pub band: f64,
    pub band_sides: BandSides,
    pub profile: LatencyProfile,
    pub vocab: usize,
    pub depth: usize,
    pub alpha: f64,
    pub prompt_len: usize,
    pub scenario: Scenario,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// `VTG1` file; replaces the synthetic video when set with `xattn_file`.
    pub grid_file: Option<PathBuf>,
    pub xattn_file: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub max_new: usize,
    pub mode: DecodeMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Vpsd,
            gamma: 5,
            keep_ratio: 0.1,
            crop_side: 5,
            band: 0.1,
            band_sides: BandSides::TopBottom,
            profile: LatencyProfile::default(),
            vocab: 32,
            depth: 3,
            alpha: 0.8,
            prompt_len: 8,
            scenario: Scenario::BoundaryBias,
            frames: 8,
            rows: 10,
            cols: 16,
            dim: 8,
            grid_file: None,
            xattn_file: None,
            seeds: vec![0],
            max_new: 256,
            mode: DecodeMode::Greedy,
        }
    }
}

fn bad(field: &str, value: &str, what: &str) -> Error {
    Error::param(field, format!("{value:?} is not {what}"))
}

fn parse_num<T: std::str::FromStr>(field: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| bad(field, v, what))
}

fn parse_f64(field: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(field, v, "a number")?;
    if !x.is_finite() {
        return Err(bad(field, v, "a finite number"));
    }
    Ok(x)
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::StaticBackground => "static_background",
        Scenario::MovingObject => "moving_object",
        Scenario::BoundaryBias => "boundary_bias",
        Scenario::UniformNoise => "uniform_noise",
    }
}

impl ExperimentConfig {
    /// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
    pub const KEYS: [&'static str; 25] = [
        "method",
        "gamma",
        "keep_ratio",
        "crop_side",
        "band",
        "band_sides",
        "t_draft_prefill",
        "t_target_prefill",
        "t_draft_decode",
        "t_target_verify",
        "t_prune",
        "vocab",
        "depth",
        "alpha",
        "prompt_len",
        "scenario",
        "frames",
        "rows",
        "cols",
        "dim",
        "grid_file",
        "xattn_file",
        "seeds",
        "max_new",
        "mode",
    ];

    /// Keys a sweep may vary.
    pub const NUMERIC_KEYS: [&'static str; 17] = [
        "gamma",
        "keep_ratio",
        "crop_side",
        "band",
        "t_draft_prefill",
        "t_target_prefill",
        "t_draft_decode",
        "t_target_verify",
        "t_prune",
        "vocab",
        "depth",
        "alpha",
        "prompt_len",
        "frames",
        "rows",
        "cols",
        "max_new",
    ];

    /// Sets one key. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let uint = |v: &str| parse_num::<usize>(key, v, "a non-negative integer");
        match key {
            "method" => {
                self.method = match v {
                    "ar" => Method::Ar,
                    "serial_sd" => Method::SerialSd,
                    "vpsd" => Method::Vpsd,
                    _ => return Err(bad(key, v, "one of ar, serial_sd, vpsd")),
                }
            }
            "gamma" => self.gamma = uint(v)?,
            "keep_ratio" => self.keep_ratio = parse_f64(key, v)?,
            "crop_side" => self.crop_side = uint(v)?,
            "band" => self.band = parse_f64(key, v)?,
            "band_sides" => {
                self.band_sides = match v {
                    "top_bottom" => BandSides::TopBottom,
                    "four_sided" => BandSides::FourSided,
                    _ => return Err(bad(key, v, "top_bottom or four_sided")),
                }
            }
            "t_draft_prefill" => self.profile.t_draft_prefill = parse_f64(key, v)?,
            "t_target_prefill" => self.profile.t_target_prefill = parse_f64(key, v)?,
            "t_draft_decode" => self.profile.t_draft_decode = parse_f64(key, v)?,
            "t_target_verify" => self.profile.t_target_verify = parse_f64(key, v)?,
            "t_prune" => self.profile.t_prune = parse_f64(key, v)?,
            "vocab" => self.vocab = uint(v)?,
            "depth" => self.depth = uint(v)?,
            "alpha" => self.alpha = parse_f64(key, v)?,
            "prompt_len" => self.prompt_len = uint(v)?,
            "scenario" => self.scenario = v.parse().map_err(|_| bad(key, v, "a known scenario"))?,
            "frames" => self.frames = uint(v)?,
            "rows" => self.rows = uint(v)?,
            "cols" => self.cols = uint(v)?,
            "dim" => self.dim = uint(v)?,
            "grid_file" => self.grid_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "xattn_file" => self.xattn_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse_num::<u64>(key, s.trim(), "a list of integers"))
                    .collect::<Result<_>>()?
            }
            "max_new" => self.max_new = uint(v)?,
            "mode" => {
                self.mode = match v {
                    "greedy" => DecodeMode::Greedy,
                    "stochastic" => DecodeMode::Stochastic,
                    _ => return Err(bad(key, v, "greedy or stochastic")),
                }
            }
            _ => return Err(Error::param(key, "unknown key")),
        }
        Ok(())
    }

    /// Current value of `key` in file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.profile;
        let path = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "method" => self.method.name().to_string(),
            "gamma" => self.gamma.to_string(),
            "keep_ratio" => self.keep_ratio.to_string(),
            "crop_side" => self.crop_side.to_string(),
            "band" => self.band.to_string(),
            "band_sides" => match self.band_sides {
                BandSides::TopBottom => "top_bottom".into(),
                BandSides::FourSided => "four_sided".into(),
            },
            "t_draft_prefill" => p.t_draft_prefill.to_string(),
            "t_target_prefill" => p.t_target_prefill.to_string(),
            "t_draft_decode" => p.t_draft_decode.to_string(),
            "t_target_verify" => p.t_target_verify.to_string(),
            "t_prune" => p.t_prune.to_string(),
            "vocab" => self.vocab.to_string(),
            "depth" => self.depth.to_string(),
            "alpha" => self.alpha.to_string(),
            "prompt_len" => self.prompt_len.to_string(),
            "scenario" => scenario_name(self.scenario).into(),
            "frames" => self.frames.to_string(),
            "rows" => self.rows.to_string(),
            "cols" => self.cols.to_string(),
            "dim" => self.dim.to_string(),
            "grid_file" => path(&self.grid_file),
            "xattn_file" => path(&self.xattn_file),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "),
            "max_new" => self.max_new.to_string(),
            "mode" => match self.mode {
                DecodeMode::Greedy => "greedy".into(),
                DecodeMode::Stochastic => "stochastic".into(),
            },
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: i + 1,
                    reason: format!("expected `key = value`, found {line:?}"),
                });
            };
            let k = k.trim();
            if !Self::KEYS.contains(&k) {
                return Err(Error::Config {
                    line: i + 1,
                    reason: format!("unknown key `{k}`"),
                });
            }
            self.set(k, v).map_err(|e| Error::Config {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Canonical file form: every key, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::param("gamma", "must be at least 1"));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::param("keep_ratio", format!("{} not in (0, 1]", self.keep_ratio)));
        }
        if self.crop_side == 0 {
            return Err(Error::param("crop_side", "must be at least 1"));
        }
        if !(self.band > 0.0 && self.band < 0.5) {
            return Err(Error::param("band", format!("{} not in (0, 0.5)", self.band)));
        }
        self.profile.validate()?;
        if self.profile.t_draft_decode <= 0.0 {
            return Err(Error::param("t_draft_decode", "must be > 0"));
        }
        if self.vocab < 2 {
            return Err(Error::param("vocab", "must be at least 2"));
        }
        if self.depth == 0 {
            return Err(Error::param("depth", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param("alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        for (k, v) in [
            ("frames", self.frames),
            ("rows", self.rows),
            ("cols", self.cols),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(Error::param(k, "must be at least 1"));
            }
        }
        if self.grid_file.is_some() != self.xattn_file.is_some() {
            return Err(Error::param("xattn_file", "grid_file and xattn_file go together"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "need at least one seed"));
        }
        if self.max_new == 0 {
            return Err(Error::param("max_new", "must be at least 1"));
        }
        Ok(())
    }

    /// Video inputs for `seed`: the configured files, or a synthetic scene.
    pub fn video(&self, seed: u64) -> Result<(VisualTokenGrid, CrossAttentionInputs)> {
        match (&self.grid_file, &self.xattn_file) {
            (Some(g), Some(x)) => Ok((read_grid(g)?, read_xattn(x)?)),
            _ => make_synthetic_grid(
                self.frames,
                self.rows,
                self.cols,
                self.dim,
                self.scenario,
                mix64(seed ^ 0x51de0),
                &SceneParams::default(),
            ),
        }
    }
}

/// What a single seed produced besides its metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum RunTrace {
    Rounds(RoundLog),
    Schedule(ScheduleTrace),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub tokens: Vec<TokenId>,
    /// Visual tokens kept for the draft; `None` for `ar`.
    pub kept: Option<usize>,
    pub boundary_share: Option<f64>,
    pub metrics: RunMetrics,
    #[serde(skip)]
    pub trace: RunTrace,
}

/// Mean and population standard deviation. `std` is absent for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt());
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub total_time: Stat,
    pub speedup: Stat,
    pub decode_speedup: Stat,
    pub mat: Stat,
    pub mat_per_round: Stat,
    pub tokens_emitted: Stat,
    pub boundary_share: Option<Stat>,
    /// Mean charged and busy time per phase.
    pub breakdown: BTreeMap<Phase, PhaseTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub runs: Vec<SeedRun>,
}

/// Target-only timeline: prefill, then one decode step per token.
fn ar_trace(tokens: usize, profile: &LatencyProfile) -> ScheduleTrace {
    let (tp, tv) = (to_ticks(profile.t_target_prefill), to_ticks(profile.t_target_verify));
    let mut events = vec![TraceEvent {
        worker: Worker::Target,
        action: Action::Prefill,
        virtual_start: 0,
        virtual_end: tp,
        round: 0,
    }];
    for i in 0..tokens as u64 {
        events.push(TraceEvent {
            worker: Worker::Target,
            action: Action::DecodeOne,
            virtual_start: tp + i * tv,
            virtual_end: tp + (i + 1) * tv,
            round: 0,
        });
    }
    ScheduleTrace {
        events,
        rounds: Vec::new(),
    }
}

/// One seed, end to end: prune the video for the draft, decode, simulate.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let streams = RunStreams::from_seed(seed);
    let prompt = random_contexts(cfg.vocab, cfg.prompt_len, 1, mix64(seed ^ 0x9e0))
        .pop()
        .unwrap_or_default();
    let mut profile = cfg.profile;
    let (mut kept, mut share) = (None, None);
    if cfg.method != Method::Ar {
        let (grid, xattn) = cfg.video(seed)?;
        let raw = RawScores::compute(&grid, &xattn, cfg.crop_side)?;
        let (_, keep) = fuse_and_select(raw, cfg.keep_ratio)?;
        let report = bias_report(&keep, cfg.band, cfg.band_sides)?;
        // Pruning work scales with the number of tokens removed.
        let total = keep.dims.tokens();
        profile.t_prune *= (total - keep.len()) as f64 / total as f64;
        kept = Some(keep.len());
        share = Some(report.overall_share);
    }
    let (tokens, metrics, trace) = match cfg.method {
        Method::Ar => {
            let target = TableOracle::random(cfg.vocab, cfg.depth, seed)?;
            let tokens = generate_ar(&target, &prompt, cfg.max_new, cfg.mode, &streams.target);
            let m = ar_metrics(tokens.len(), &profile)?;
            (tokens, m, RunTrace::Schedule(ar_trace(cfg.max_new, &profile)))
        }
        Method::SerialSd => {
            let pair = make_pair(cfg.vocab, cfg.depth, cfg.alpha, seed)?;
            let (tokens, log) = run_serial_sd(
                &pair.draft,
                &pair.target,
                &prompt,
                cfg.gamma,
                cfg.max_new,
                cfg.mode,
                &streams,
            )?;
            let m = simulate_rounds(&log, &profile, Charging::Serial)?;
            (tokens, m, RunTrace::Rounds(log))
        }
        Method::Vpsd => {
            let pair = make_pair(cfg.vocab, cfg.depth, cfg.alpha, seed)?;
            let vc = VpsdConfig::new(cfg.gamma, cfg.max_new, cfg.mode);
            let (tokens, trace) = run_vpsd(&pair.draft, &pair.target, &prompt, vc, &profile, &streams)?;
            let m = simulate_schedule(&trace, &profile)?;
            (tokens, m, RunTrace::Schedule(trace))
        }
    };
    Ok(SeedRun {
        seed,
        tokens,
        kept,
        boundary_share: share,
        metrics,
        trace,
    })
}

fn summarize(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Summary {
    let stat = |f: &dyn Fn(&SeedRun) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let shares: Option<Vec<f64>> = runs.iter().map(|r| r.boundary_share).collect();
    let n = runs.len() as f64;
    let breakdown = Phase::ALL
        .iter()
        .map(|p| {
            let mut t = PhaseTime::default();
            for r in runs {
                let x = r.metrics.breakdown.get(p).copied().unwrap_or_default();
                t.charged += x.charged / n;
                t.busy += x.busy / n;
            }
            (*p, t)
        })
        .collect();
    Summary {
        method: cfg.method,
        seeds: cfg.seeds.clone(),
        total_time: stat(&|r| r.metrics.total_time),
        speedup: stat(&|r| r.metrics.speedup),
        decode_speedup: stat(&|r| r.metrics.decode_speedup),
        mat: stat(&|r| r.metrics.mat),
        mat_per_round: stat(&|r| r.metrics.mat_per_round),
        tokens_emitted: stat(&|r| r.metrics.tokens_emitted as f64),
        boundary_share: shares.map(|s| Stat::of(&s)),
        breakdown,
    }
}

/// Runs every seed and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        config: cfg.clone(),
        summary: summarize(cfg, &runs),
        runs,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per seed.
    pub fn write_runs_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", crate::CSV_VERSION)?;
        writeln!(
            out,
            "seed,method,total_time,speedup,decode_speedup,mat,mat_per_round,tokens,boundary_share"
        )?;
        for r in &self.runs {
            let m = &r.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.seed,
                self.config.method.name(),
                m.total_time,
                m.speedup,
                m.decode_speedup,
                m.mat,
                m.mat_per_round,
                m.tokens_emitted,
                opt(r.boundary_share)
            )?;
        }
        Ok(())
    }

    /// Phase breakdown averaged over seeds.
    pub fn write_breakdown_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_breakdown_csv(out, &self.summary.breakdown, self.summary.total_time.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Axis value as it reads back from the config.
    pub value: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

/// One experiment per value of `axis`. Points run in parallel; rows come
/// back in the order of `values`.
pub fn sweep(cfg: &ExperimentConfig, axis: &str, values: &[String]) -> Result<SweepResult> {
    if !ExperimentConfig::NUMERIC_KEYS.contains(&axis) {
        return Err(Error::param(axis, "not a numeric config key"));
    }
    if values.is_empty() {
        return Err(Error::param("values", "nothing to sweep"));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(axis, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = configs
        .par_iter()
        .map(|c| {
            let rep = run_experiment(c)?;
            Ok(SweepRow {
                value: c.get(axis).expect("numeric key"),
                summary: rep.summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis: axis.to_string(),
        rows,
    })
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", crate::CSV_VERSION)?;
        writeln!(out, "{},mat,mat_per_round,speedup,boundary_share", self.axis)?;
        for r in &self.rows {
            let s = &r.summary;
            writeln!(
                out,
                "{},{},{},{},{}",
                r.value,
                s.mat.mean,
                s.mat_per_round.mean,
                s.speedup.mean,
                opt(s.boundary_share.map(|b| b.mean))
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
