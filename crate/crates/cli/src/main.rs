//! `specdeck` command-line harness.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use specdeck::bias::bias_report;
use specdeck::harness::{run_experiment, sweep, ExperimentConfig, RunTrace};
use specdeck::preserve::{fuse_and_select, RawScores};
use specdeck::sim::{make_pair, random_contexts};
use specdeck::tensor_io::{save_grid, save_scores, save_xattn};
use specdeck::trace::ScheduleTrace;

/// Environment variable holding the default seed.
const SEED_ENV: &str = "SPECDECK_SEED";

#[derive(Parser)]
#[command(
    name = "specdeck",
    version,
    about = "Speculative decoding and visual token pruning simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration over its seeds.
    Simulate(SimulateArgs),
    /// Run one configuration per value of a numeric key.
    Sweep(SweepArgs),
    /// Score the video and write the keep set.
    Prune(PruneArgs),
    /// Where the kept tokens sit relative to the frame border.
    BiasReport(BiasArgs),
    /// Draw a schedule trace as two rows of text.
    TraceRender(RenderArgs),
    /// Write a synthetic video, its attention inputs and a model pair.
    Synth(SynthArgs),
}

/// Configuration sources. Later ones win: defaults, `SPECDECK_SEED`,
/// `--config`, `--set`, then the named flags.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set gamma=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    keep_ratio: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_new: Option<String>,
    /// Single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    xattn: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.set("seeds", &s).with_context(|| format!("bad {SEED_ENV}"))?;
        }
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            cfg.merge_text(&text).with_context(|| format!("in {}", p.display()))?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            cfg.set(k.trim(), v)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("method", self.method.clone()),
            ("gamma", self.gamma.clone()),
            ("keep_ratio", self.keep_ratio.clone()),
            ("mode", self.mode.clone()),
            ("max_new", self.max_new.clone()),
            ("seeds", self.seed.clone()),
            ("seeds", self.seeds.clone()),
            ("grid_file", path(&self.grid)),
            ("xattn_file", path(&self.xattn)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory for summary.json, runs.csv, breakdown.csv and per-seed traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print each seed's timeline instead of the JSON summary.
    #[arg(long)]
    timeline: bool,
    #[arg(long, default_value_t = 80)]
    width: usize,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Numeric key to vary.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Also write attn, temp, spa and fused score dumps here.
    #[arg(long)]
    scores_dir: Option<PathBuf>,
    /// Keep set JSON destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BiasArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    band: Option<String>,
    #[arg(long)]
    band_sides: Option<String>,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Schedule trace JSONL.
    trace: PathBuf,
    #[arg(long, default_value_t = 80)]
    width: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    grid_out: Option<PathBuf>,
    #[arg(long)]
    xattn_out: Option<PathBuf>,
    /// Model pair as JSON, with the prompt's contexts filled in.
    #[arg(long)]
    oracle_out: Option<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_file(p, bytes),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    if a.dump_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let rep = run_experiment(&cfg)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_file(&dir.join("summary.json"), rep.to_json()?.as_bytes())?;
        let mut buf = Vec::new();
        rep.write_runs_csv(&mut buf)?;
        write_file(&dir.join("runs.csv"), &buf)?;
        buf.clear();
        rep.write_breakdown_csv(&mut buf)?;
        write_file(&dir.join("breakdown.csv"), &buf)?;
        for r in &rep.runs {
            buf.clear();
            match &r.trace {
                RunTrace::Rounds(log) => log.write_jsonl(&mut buf)?,
                RunTrace::Schedule(t) => t.write_jsonl(&mut buf)?,
            }
            write_file(&dir.join(format!("trace-{}.jsonl", r.seed)), &buf)?;
        }
    }
    if a.timeline {
        for r in &rep.runs {
            match &r.trace {
                RunTrace::Schedule(t) => print!("seed {}\n{}", r.seed, t.render_timeline(a.width)),
                RunTrace::Rounds(_) => bail!("--timeline needs a schedule; method serial_sd only logs rounds"),
            }
        }
    } else if a.out.is_none() {
        print!("{}", rep.to_json()?);
    }
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let res = sweep(&cfg, &a.axis, &a.values)?;
    let mut buf = Vec::new();
    res.write_csv(&mut buf)?;
    emit(a.out.as_deref(), &buf)?;
    if let Some(p) = &a.json {
        write_file(p, res.to_json()?.as_bytes())?;
    }
    Ok(())
}

fn prune(a: &PruneArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let (grid, xattn) = cfg.video(first_seed(&cfg))?;
    let raw = RawScores::compute(&grid, &xattn, cfg.crop_side)?;
    let (map, keep) = fuse_and_select(raw, cfg.keep_ratio)?;
    if let Some(dir) = &a.scores_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for (name, s) in [
            ("attn", &map.norm_attn),
            ("temp", &map.norm_temp),
            ("spa", &map.norm_spa),
            ("fused", &map.fused),
        ] {
            save_scores(&dir.join(format!("{name}.vtg")), s)?;
        }
    }
    emit(
        a.out.as_deref(),
        (serde_json::to_string_pretty(&keep)? + "\n").as_bytes(),
    )
}

fn bias(a: &BiasArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(b) = &a.band {
        cfg.set("band", b)?;
    }
    if let Some(s) = &a.band_sides {
        cfg.set("band_sides", s)?;
    }
    cfg.validate()?;
    let (grid, xattn) = cfg.video(first_seed(&cfg))?;
    let raw = RawScores::compute(&grid, &xattn, cfg.crop_side)?;
    let (_, keep) = fuse_and_select(raw, cfg.keep_ratio)?;
    let rep = bias_report(&keep, cfg.band, cfg.band_sides)?;
    emit(
        a.out.as_deref(),
        (serde_json::to_string_pretty(&rep)? + "\n").as_bytes(),
    )?;
    if let Some(p) = &a.csv {
        let mut buf = Vec::new();
        rep.write_csv(&mut buf)?;
        write_file(p, &buf)?;
    }
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let f = fs::File::open(&a.trace).with_context(|| format!("cannot open {}", a.trace.display()))?;
    let t = ScheduleTrace::read_jsonl(BufReader::new(f)).with_context(|| format!("in {}", a.trace.display()))?;
    t.validate().with_context(|| format!("in {}", a.trace.display()))?;
    print!("{}", t.render_timeline(a.width));
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    if a.grid_out.is_none() && a.xattn_out.is_none() && a.oracle_out.is_none() {
        bail!("nothing to write: pass --grid-out, --xattn-out or --oracle-out");
    }
    let seed = first_seed(&cfg);
    if a.grid_out.is_some() || a.xattn_out.is_some() {
        let (grid, xattn) = cfg.video(seed)?;
        if let Some(p) = &a.grid_out {
            save_grid(p, &grid)?;
        }
        if let Some(p) = &a.xattn_out {
            save_xattn(p, &xattn)?;
        }
    }
    if let Some(p) = &a.oracle_out {
        let mut pair = make_pair(cfg.vocab, cfg.depth, cfg.alpha, seed)?;
        let ctx = random_contexts(cfg.vocab, cfg.prompt_len, 16, seed);
        pair.target.materialize(&ctx);
        pair.draft.materialize(&ctx);
        let doc = serde_json::json!({
            "alpha": pair.alpha,
            "target": pair.target,
            "draft": pair.draft,
        });
        write_file(p, (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Sweep(a) => run_sweep(a),
        Cmd::Prune(a) => prune(a),
        Cmd::BiasReport(a) => bias(a),
        Cmd::TraceRender(a) => render(a),
        Cmd::Synth(a) => synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
