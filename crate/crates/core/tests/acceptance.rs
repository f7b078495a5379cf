//! Exit-gate checks. Run with `cargo test --test acceptance`; prints one
//! PASS/FAIL line per criterion and fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use specdeck::bias::{bias_report, BandSides};
use specdeck::harness::{run_experiment, ExperimentConfig, Method, RunTrace};
use specdeck::latency::{
    acceptance_stats, prefill_buffer, round_speedup, simulate_rounds, simulate_schedule, Charging, LatencyProfile,
};
use specdeck::oracle::generate_ar;
use specdeck::preserve::{
    fuse_and_select, score_attention, score_spatial, score_temporal, select_top_k, CrossAttentionInputs, KeepSet,
    RawScores, TokenIndex, VisualTokenGrid,
};
use specdeck::prob::{accept_prob, residual, sample};
use specdeck::schedule::{run_vpsd, run_vpsd_threaded, ThreadedOptions, VpsdConfig};
use specdeck::serial::{run_serial_sd, verify, DraftBatch};
use specdeck::sim::{iid_round_log, make_pair, make_synthetic_grid, Scenario, SceneParams};
use specdeck::{DecodeMode, ModelOracle, ProbDist, RunStreams, SeededRng, Stream, TokenId};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed < Duration::from_secs(limit_s), || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_dist(r: &mut ChaCha8Rng, v: usize) -> ProbDist {
    ProbDist::from_weights((0..v).map(|_| r.random::<f64>() + 1e-3).collect()).unwrap()
}

/// Decode ratio 2:1; see criterion 9.
fn overlap_profile() -> LatencyProfile {
    LatencyProfile {
        t_draft_prefill: 0.2,
        t_target_prefill: 0.8,
        t_draft_decode: 0.05,
        t_target_verify: 0.10,
        t_prune: 0.0,
    }
}

struct LosslessRun {
    serial_time: f64,
    vpsd_time: f64,
}

/// Criteria 1 and 9 share these runs.
fn lossless_runs() -> Result<Vec<LosslessRun>, String> {
    let profile = overlap_profile();
    let mut r = rng(1);
    let mut out = Vec::new();
    for i in 0..200u64 {
        let vocab = if i % 2 == 0 { 8 } else { 16 };
        let alpha = match i {
            0 => 0.0,
            1 => 1.0,
            _ => r.random::<f64>(),
        };
        let pair = make_pair(vocab, 3, alpha, 1000 + i).map_err(|e| e.to_string())?;
        let prompt: Vec<TokenId> = (0..4).map(|_| r.random_range(0..vocab as TokenId)).collect();
        let streams = RunStreams::from_seed(i);
        let ar = generate_ar(&pair.target, &prompt, 48, DecodeMode::Greedy, &streams.target);
        for gamma in [1, 3, 5] {
            let (serial, log) = run_serial_sd(
                &pair.draft,
                &pair.target,
                &prompt,
                gamma,
                48,
                DecodeMode::Greedy,
                &streams,
            )
            .map_err(|e| e.to_string())?;
            let cfg = VpsdConfig::new(gamma, 48, DecodeMode::Greedy);
            let (vpsd, trace) =
                run_vpsd(&pair.draft, &pair.target, &prompt, cfg, &profile, &streams).map_err(|e| e.to_string())?;
            check(serial == ar, || {
                format!("pair {i} gamma {gamma}: serial output differs from AR")
            })?;
            check(vpsd == ar, || {
                format!("pair {i} gamma {gamma}: overlapped output differs from AR")
            })?;
            let s = simulate_rounds(&log, &profile, Charging::Serial).map_err(|e| e.to_string())?;
            let v = simulate_schedule(&trace, &profile).map_err(|e| e.to_string())?;
            out.push(LosslessRun {
                serial_time: s.total_time,
                vpsd_time: v.total_time,
            });
        }
    }
    Ok(out)
}

fn c1_greedy_lossless() -> Outcome {
    let t = Instant::now();
    let runs = lossless_runs()?;
    within(t.elapsed(), 30)?;
    Ok(format!(
        "{} runs token-identical to AR in {:.1}s",
        runs.len(),
        t.elapsed().as_secs_f64()
    ))
}

/// Fixed next-token distribution regardless of context.
struct Fixed(ProbDist);

impl ModelOracle for Fixed {
    fn vocab(&self) -> usize {
        self.0.vocab()
    }
    fn next_dist(&self, _: &[TokenId]) -> ProbDist {
        self.0.clone()
    }
}

fn c2_stochastic_exact() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2);
    let trials = 100_000;
    let mut worst_exact = 0f64;
    let mut worst_tv = 0f64;
    for pair in 0..20u64 {
        let (p, q) = (random_dist(&mut r, 4), random_dist(&mut r, 4));
        // Exact law: accepted mass plus rejected mass routed through the residual.
        let res = residual(&p, &q).map_err(|e| e.to_string())?;
        let mut law = [0f64; 4];
        let mut rejected = 0.0;
        for x in 0..4u32 {
            let a = accept_prob(&p, &q, x).map_err(|e| e.to_string())?;
            law[x as usize] += q.prob(x) * a;
            rejected += q.prob(x) * (1.0 - a);
        }
        for ((l, r), want) in law.iter_mut().zip(res.probs()).zip(p.probs()) {
            *l += rejected * r;
            worst_exact = worst_exact.max((*l - want).abs());
        }
        // Monte Carlo through the verifier actually used for decoding.
        let target = Fixed(p.clone());
        let mut draft_rng = SeededRng::new(pair, Stream::Draft);
        let mut counts = [0usize; 4];
        for trial in 0..trials {
            let x = sample(&q, &mut draft_rng);
            let batch = DraftBatch {
                tokens: vec![x],
                dists: vec![q.clone()],
            };
            let draws = SeededRng::new(pair * 1_000_003 + trial, Stream::Verifier);
            let out = verify(&target, &[], &batch, &draws, DecodeMode::Stochastic).map_err(|e| e.to_string())?;
            counts[out.emitted[0] as usize] += 1;
        }
        let emp = ProbDist::from_weights(counts.iter().map(|&c| c as f64).collect()).unwrap();
        worst_tv = worst_tv.max(emp.tv_distance(&p).unwrap());
    }
    check(worst_exact <= 1e-12, || format!("exact law off by {worst_exact:e}"))?;
    check(worst_tv < 0.01, || format!("Monte Carlo TV {worst_tv}"))?;
    within(t.elapsed(), 10)?;
    Ok(format!(
        "max |law - p| {worst_exact:.1e}, max TV {worst_tv:.4}, {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

fn c3_round_speedup() -> Outcome {
    let p = LatencyProfile {
        t_draft_decode: 1.0,
        t_target_verify: 3.0,
        ..LatencyProfile::default()
    };
    let full = round_speedup(&p, 3, 3).map_err(|e| e.to_string())?;
    let none = round_speedup(&p, 3, 0).map_err(|e| e.to_string())?;
    check(full == 2.0 && none == 0.5, || format!("got {full} and {none}"))?;
    Ok("2.0 and 0.5".into())
}

fn c4_prefill_buffer() -> Outcome {
    let p = LatencyProfile {
        t_target_prefill: 0.8,
        t_draft_prefill: 0.2,
        t_draft_decode: 0.05,
        ..LatencyProfile::default()
    };
    let n = prefill_buffer(&p).map_err(|e| e.to_string())?;
    check(n == 12, || format!("got {n}"))?;
    Ok("12 tokens".into())
}

fn gaussian4(r: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || r.sample::<f32, _>(StandardNormal))
}

/// Brute-force scoring, written straight from the definitions.
mod naive {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        if aa == 0.0 || bb == 0.0 {
            0.0
        } else {
            ab / (aa.sqrt() * bb.sqrt())
        }
    }

    fn tok(g: &Array4<f32>, f: usize, r: usize, c: usize) -> Vec<f64> {
        (0..g.dim().3).map(|k| g[[f, r, c, k]] as f64).collect()
    }

    pub fn attention(q: &Array4<f32>, k: &Array4<f32>, shape: (usize, usize, usize)) -> Array3<f64> {
        let (nl, nh, nt, dk) = q.dim();
        let nv = k.dim().2;
        let mut acc = vec![0f64; nv];
        for l in 0..nl {
            for h in 0..nh {
                for i in 0..nt {
                    let mut logits = vec![0f64; nv];
                    for j in 0..nv {
                        for d in 0..dk {
                            logits[j] += q[[l, h, i, d]] as f64 * k[[l, h, j, d]] as f64;
                        }
                        logits[j] /= (dk as f64).sqrt();
                    }
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                    for j in 0..nv {
                        acc[j] += (logits[j] - m).exp() / z;
                    }
                }
            }
        }
        let n = (nl * nh * nt) as f64;
        Array3::from_shape_fn(shape, |(f, r, c)| acc[(f * shape.1 + r) * shape.2 + c] / n)
    }

    pub fn temporal(g: &Array4<f32>) -> Array3<f64> {
        let (nf, nr, nc, _) = g.dim();
        Array3::from_shape_fn((nf, nr, nc), |(f, r, c)| {
            if nf == 1 {
                return 0.0;
            }
            let v = tok(g, f, r, c);
            let mut sum = 0.0;
            let mut n = 0.0;
            if f > 0 {
                sum += cos(&v, &tok(g, f - 1, r, c));
                n += 1.0;
            }
            if f + 1 < nf {
                sum += cos(&v, &tok(g, f + 1, r, c));
                n += 1.0;
            }
            1.0 - sum / n
        })
    }

    pub fn spatial(g: &Array4<f32>, side: usize) -> Array3<f64> {
        let (nf, nr, nc, _) = g.dim();
        Array3::from_shape_fn((nf, nr, nc), |(f, r, c)| {
            let (r0, c0) = (r / side * side, c / side * side);
            let mut crop = Vec::new();
            for rr in r0..(r0 + side).min(nr) {
                for cc in c0..(c0 + side).min(nc) {
                    crop.push(tok(g, f, rr, cc));
                }
            }
            let me = tok(g, f, r, c);
            // cos equals the dot product of the L2-normalised vectors.
            let row: Vec<f64> = crop.iter().map(|u| cos(&me, u)).collect();
            let m = row.len() as f64;
            let mean = row.iter().sum::<f64>() / m;
            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m
        })
    }

    pub fn zscore(s: &Array3<f64>) -> Array3<f64> {
        let (nf, nr, nc) = s.dim();
        let mut out = Array3::zeros((nf, nr, nc));
        for f in 0..nf {
            let vals: Vec<f64> = (0..nr)
                .flat_map(|r| (0..nc).map(move |c| (r, c)))
                .map(|(r, c)| s[[f, r, c]])
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            // Spread at rounding level means a constant frame.
            let big = vals.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let sd = if sd <= 1e-12 * big { 0.0 } else { sd };
            for r in 0..nr {
                for c in 0..nc {
                    out[[f, r, c]] = if sd == 0.0 { 0.0 } else { (s[[f, r, c]] - mean) / sd };
                }
            }
        }
        out
    }

    pub fn top_k(fused: &Array3<f64>, keep_ratio: f64) -> Vec<TokenIndex> {
        let (_, nr, nc) = fused.dim();
        let mut all: Vec<(f64, usize, usize, usize)> =
            fused.indexed_iter().map(|((f, r, c), &v)| (v, f, r, c)).collect();
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
        });
        let k = ((keep_ratio * all.len() as f64).round() as usize).max(1);
        let mut kept: Vec<TokenIndex> = all[..k]
            .iter()
            .map(|&(_, frame, row, col)| TokenIndex { frame, row, col })
            .collect();
        kept.sort();
        let _ = (nr, nc);
        kept
    }

    /// Both sets are valid top-k selections, differing only among tokens whose
    /// fused scores tie with the cut-off up to rounding.
    pub fn tie_swap(fused: &Array3<f64>, got: &[TokenIndex], want: &[TokenIndex]) -> bool {
        let score = |t: &TokenIndex| fused[[t.frame, t.row, t.col]];
        let cut = want.iter().map(score).fold(f64::INFINITY, f64::min);
        got.len() == want.len()
            && got
                .iter()
                .filter(|t| !want.contains(t))
                .chain(want.iter().filter(|t| !got.contains(t)))
                .all(|t| (score(t) - cut).abs() <= 1e-9)
    }
}

fn max_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c5_scoring_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng(5);
    let mut worst = 0f64;
    let mut ties = 0;
    for trial in 0..50 {
        let (f, rows, cols, d) = (
            r.random_range(1..=4),
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=16),
        );
        let (nl, nh, nt, dk) = (
            r.random_range(1..=2),
            r.random_range(1..=3),
            r.random_range(1..=4),
            r.random_range(1..=8),
        );
        let side = r.random_range(1..=5);
        let keep_ratio = r.random_range(0.05..=1.0);
        let emb = gaussian4(&mut r, (f, rows, cols, d));
        let q = gaussian4(&mut r, (nl, nh, nt, dk));
        let k = gaussian4(&mut r, (nl, nh, f * rows * cols, dk));
        let grid = VisualTokenGrid::new(emb.clone()).unwrap();
        let xattn = CrossAttentionInputs::new(q.clone(), k.clone()).unwrap();

        let attn = score_attention(&grid, &xattn).map_err(|e| e.to_string())?;
        let temp = score_temporal(&grid);
        let spa = score_spatial(&grid, side).map_err(|e| e.to_string())?;
        let n_attn = naive::attention(&q, &k, (f, rows, cols));
        let n_temp = naive::temporal(&emb);
        let n_spa = naive::spatial(&emb, side);
        for (name, a, b) in [
            ("attention", &attn, &n_attn),
            ("temporal", &temp, &n_temp),
            ("spatial", &spa, &n_spa),
        ] {
            let dmax = max_diff(a, b);
            worst = worst.max(dmax);
            check(dmax <= 1e-6, || format!("trial {trial}: {name} off by {dmax:e}"))?;
        }
        let (_, keep) = fuse_and_select(RawScores { attn, temp, spa }, keep_ratio).map_err(|e| e.to_string())?;
        let fused = naive::zscore(&n_attn) + naive::zscore(&n_spa) + naive::zscore(&n_temp);
        let want = naive::top_k(&fused, keep_ratio);
        if keep.indices != want {
            check(naive::tie_swap(&fused, &keep.indices, &want), || {
                format!("trial {trial}: keep set differs")
            })?;
            ties += 1;
        }
    }
    within(t.elapsed(), 20)?;
    Ok(format!(
        "50 grids, max score diff {worst:.1e}, {ties} exact ties resolved differently, {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

fn c6_affine_invariance() -> Outcome {
    let mut r = rng(6);
    for trial in 0..10 {
        let shape = (r.random_range(1..=4), r.random_range(2..=8), r.random_range(2..=8));
        let mut draw = || Array3::from_shape_simple_fn(shape, || r.sample::<f64, _>(StandardNormal));
        let raw = RawScores {
            attn: draw(),
            temp: draw(),
            spa: draw(),
        };
        let keep_ratio = 0.1 + 0.8 * (trial as f64 / 10.0);
        let (_, base) = fuse_and_select(raw.clone(), keep_ratio).map_err(|e| e.to_string())?;
        let mut moved = raw.clone();
        let target = match trial % 3 {
            0 => &mut moved.attn,
            1 => &mut moved.temp,
            _ => &mut moved.spa,
        };
        for mut frame in target.outer_iter_mut() {
            let a = r.random_range(0.1..10.0);
            let b = r.random_range(-5.0..5.0);
            frame.mapv_inplace(|x| a * x + b);
        }
        let (_, after) = fuse_and_select(moved, keep_ratio).map_err(|e| e.to_string())?;
        check(same_keep(&base, &after), || format!("trial {trial}: keep set changed"))?;
    }
    Ok("10 rescalings, keep sets identical".into())
}

fn same_keep(a: &KeepSet, b: &KeepSet) -> bool {
    a.indices == b.indices && a.dims == b.dims
}

fn shares(scenario: Scenario, dims: (usize, usize, usize), seed: u64) -> Result<(f64, f64, usize), String> {
    let (g, x) = make_synthetic_grid(dims.0, dims.1, dims.2, 8, scenario, seed, &SceneParams::default())
        .map_err(|e| e.to_string())?;
    let raw = RawScores::compute(&g, &x, 5).map_err(|e| e.to_string())?;
    let attn_only = select_top_k(&raw.attn, 0.1).map_err(|e| e.to_string())?;
    let (_, fused) = fuse_and_select(raw, 0.1).map_err(|e| e.to_string())?;
    let share = |k: &KeepSet| bias_report(k, 0.1, BandSides::TopBottom).map(|b| b.overall_share);
    Ok((
        share(&attn_only).map_err(|e| e.to_string())?,
        share(&fused).map_err(|e| e.to_string())?,
        fused.len(),
    ))
}

fn c7_position_bias() -> Outcome {
    let (attn, fused, _) = shares(Scenario::BoundaryBias, (8, 10, 16), 7)?;
    check(attn > 0.44, || format!("attention-only share {attn}"))?;
    check(fused < attn, || {
        format!("fused {fused} not below attention-only {attn}")
    })?;
    let (_, noise, n) = shares(Scenario::UniformNoise, (50, 10, 200), 7)?;
    check(n >= 10_000, || format!("only {n} kept tokens"))?;
    check((noise - 0.20).abs() <= 0.03, || format!("uniform share {noise}"))?;
    Ok(format!(
        "attention-only {attn:.3}, fused {fused:.3}, uniform {noise:.3} over {n}"
    ))
}

fn c8_mat_statistics() -> Outcome {
    let (alpha, gamma) = (0.8f64, 5);
    let log = iid_round_log(alpha, gamma, 100_000, 8);
    let (_, per_round) = acceptance_stats(&log.rounds);
    let expected = (1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha);
    let rel = (per_round - expected).abs() / expected;
    check(rel < 0.02, || format!("mat_per_round {per_round} vs {expected}"))?;
    Ok(format!("{per_round:.4} vs {expected:.4} ({:.2}%)", rel * 100.0))
}

fn c9_overlap_dominance() -> Outcome {
    let runs = lossless_runs()?;
    let worst = runs
        .iter()
        .map(|r| r.vpsd_time - r.serial_time)
        .fold(f64::MIN, f64::max);
    let bad = runs.iter().filter(|r| r.vpsd_time > r.serial_time).count();
    check(bad == 0, || format!("{bad} runs slower than serial, worst by {worst}"))?;

    let mut idle_checked = 0;
    for gamma in [1usize, 3, 5] {
        for extra in [0.0, 0.1] {
            let profile = LatencyProfile {
                t_target_verify: gamma as f64 * 0.05 + extra,
                ..overlap_profile()
            };
            for seed in 0..5u64 {
                let pair = make_pair(16, 3, 1.0, seed).map_err(|e| e.to_string())?;
                let cfg = VpsdConfig::new(gamma, 48, DecodeMode::Greedy);
                let (_, trace) = run_vpsd(
                    &pair.draft,
                    &pair.target,
                    &[1, 2, 3],
                    cfg,
                    &profile,
                    &RunStreams::from_seed(seed),
                )
                .map_err(|e| e.to_string())?;
                let idle = trace.target_idle_after_prefill();
                check(idle == 0, || {
                    format!(
                        "gamma {gamma} t_verify {}: target idle {idle} ticks",
                        profile.t_target_verify
                    )
                })?;
                idle_checked += 1;
            }
        }
    }
    Ok(format!(
        "{} runs, overlapped never slower (smallest margin {:.3}); {idle_checked} zero-idle traces",
        runs.len(),
        -worst
    ))
}

fn artifacts(cfg: &ExperimentConfig) -> Result<Vec<Vec<u8>>, String> {
    let rep = run_experiment(cfg).map_err(|e| e.to_string())?;
    let mut out = vec![rep.to_json().map_err(|e| e.to_string())?.into_bytes()];
    let mut buf = Vec::new();
    rep.write_runs_csv(&mut buf).unwrap();
    out.push(std::mem::take(&mut buf));
    rep.write_breakdown_csv(&mut buf).unwrap();
    out.push(std::mem::take(&mut buf));
    for r in &rep.runs {
        match &r.trace {
            RunTrace::Rounds(l) => l.write_jsonl(&mut buf).unwrap(),
            RunTrace::Schedule(t) => t.write_jsonl(&mut buf).unwrap(),
        }
        out.push(std::mem::take(&mut buf));
    }
    Ok(out)
}

fn c10_determinism() -> Outcome {
    for method in [Method::Ar, Method::SerialSd, Method::Vpsd] {
        for mode in [DecodeMode::Greedy, DecodeMode::Stochastic] {
            let cfg = ExperimentConfig {
                method,
                mode,
                seeds: vec![11, 12],
                max_new: 64,
                ..ExperimentConfig::default()
            };
            check(artifacts(&cfg)? == artifacts(&cfg)?, || {
                format!("{method:?} {mode:?}: outputs differ")
            })?;
        }
    }
    let mut r = rng(10);
    let mut paced = 0;
    for i in 0..50u64 {
        let vocab = [8, 16, 32][i as usize % 3];
        let mode = if i % 2 == 0 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Stochastic
        };
        let pair = make_pair(vocab, 3, r.random::<f64>(), 500 + i).map_err(|e| e.to_string())?;
        let cfg = VpsdConfig::new(r.random_range(1..=6), r.random_range(8..=64), mode);
        let profile = LatencyProfile {
            t_draft_prefill: r.random_range(0.05..0.4),
            t_target_prefill: r.random_range(0.2..1.2),
            t_draft_decode: r.random_range(0.02..0.1),
            t_target_verify: r.random_range(0.05..0.4),
            t_prune: if i % 4 == 0 { 0.1 } else { 0.0 },
        };
        let prompt: Vec<TokenId> = (0..5).map(|_| r.random_range(0..vocab as TokenId)).collect();
        let streams = RunStreams::from_seed(i);
        let (tokens, trace) =
            run_vpsd(&pair.draft, &pair.target, &prompt, cfg, &profile, &streams).map_err(|e| e.to_string())?;
        let opts = ThreadedOptions {
            time_scale: (i % 10 == 0).then_some(1e-4),
        };
        paced += usize::from(opts.time_scale.is_some());
        let real = run_vpsd_threaded(&pair.draft, &pair.target, &prompt, cfg, &profile, &streams, opts)
            .map_err(|e| e.to_string())?;
        check(real.tokens == tokens, || {
            format!("config {i}: executors commit different tokens")
        })?;
        check(real.rounds == trace.rounds, || {
            format!("config {i}: executors log different rounds")
        })?;
    }
    Ok(format!(
        "repeat runs byte-identical; 50 configs ({paced} paced) agree across executors"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("greedy losslessness", c1_greedy_lossless),
        ("stochastic exactness", c2_stochastic_exact),
        ("round speedup examples", c3_round_speedup),
        ("prefill buffer arithmetic", c4_prefill_buffer),
        ("scoring oracle equivalence", c5_scoring_oracle),
        ("z-score affine invariance", c6_affine_invariance),
        ("position bias", c7_position_bias),
        ("MAT statistics", c8_mat_statistics),
        ("overlap dominance", c9_overlap_dominance),
        ("determinism and executor equivalence", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
