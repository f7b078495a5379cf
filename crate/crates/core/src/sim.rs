//! Synthetic stand-ins for the draft/target pair and for video token grids.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::ModelOracle;
use crate::preserve::{CrossAttentionInputs, VisualTokenGrid};
use crate::prob::{ProbDist, TokenId};
use crate::rng::{mix64, SeededRng, Stream};
use crate::serial::{RoundKind, RoundLog, RoundRecord};

/// Context length the synthetic oracles condition on.
pub const DEFAULT_DEPTH: usize = 3;

/// Softmax temperature scale for procedurally generated distributions.
pub const DEFAULT_SHARPNESS: f64 = 2.0;

/// Hash of the last `depth` tokens. Short contexts are padded on the left
/// with a sentinel so they never collide with real tokens.
pub fn context_hash(prefix: &[TokenId], depth: usize) -> u64 {
    let mut h = mix64(depth as u64);
    let pad = depth.saturating_sub(prefix.len());
    for _ in 0..pad {
        h = mix64(h ^ u64::MAX);
    }
    for &t in &prefix[prefix.len().saturating_sub(depth)..] {
        h = mix64(h ^ t as u64);
    }
    h
}

fn unit_from(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Rule for contexts missing from the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Softmax of `sharpness`-scaled standard normals seeded by the context.
    Random { seed: u64, sharpness: f64 },
    /// Copies `base` on a fraction `alpha` of contexts and otherwise swaps
    /// its two most likely tokens.
    Agreement {
        base: Box<Generator>,
        alpha: f64,
        seed: u64,
    },
}

impl Generator {
    fn generate(&self, vocab: usize, h: u64) -> ProbDist {
        match self {
            Generator::Random { seed, sharpness } => {
                let mut rng = SeededRng::new(mix64(seed ^ h), Stream::Data);
                let logits: Vec<f64> = (0..vocab)
                    .map(|_| sharpness * rng.rng().sample::<f64, _>(StandardNormal))
                    .collect();
                ProbDist::softmax(&logits).expect("finite logits")
            }
            Generator::Agreement { base, alpha, seed } => {
                let p = base.generate(vocab, h);
                if agrees(*seed, *alpha, h) {
                    p
                } else {
                    swap_top_two(&p)
                }
            }
        }
    }
}

fn agrees(seed: u64, alpha: f64, h: u64) -> bool {
    unit_from(mix64(seed ^ mix64(h))) < alpha
}

/// Exchanges the argmax with the second most likely token.
pub fn swap_top_two(p: &ProbDist) -> ProbDist {
    let first = p.argmax() as usize;
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &v) in p.probs().iter().enumerate() {
        if i != first && v > p.probs()[second] {
            second = i;
        }
    }
    let mut probs = p.probs().to_vec();
    probs.swap(first, second);
    ProbDist::new(probs).expect("permutation of a valid distribution")
}

/// Next-token model backed by a context-hash table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableOracle {
    pub vocab: usize,
    pub depth: usize,
    pub table: BTreeMap<u64, ProbDist>,
    /// Used when a context is neither tabled nor generated.
    pub fallback: ProbDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
}

impl TableOracle {
    /// Procedural oracle with an empty table.
    pub fn random(vocab: usize, depth: usize, seed: u64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::param("vocab", "must be at least 2"));
        }
        Ok(Self {
            vocab,
            depth,
            table: BTreeMap::new(),
            fallback: ProbDist::from_weights(vec![1.0; vocab])?,
            generator: Some(Generator::Random {
                seed,
                sharpness: DEFAULT_SHARPNESS,
            }),
        })
    }

    /// Stores the distribution for `prefix` in the table.
    pub fn insert(&mut self, prefix: &[TokenId], dist: ProbDist) -> Result<()> {
        if dist.vocab() != self.vocab {
            return Err(Error::VocabMismatch {
                left: self.vocab,
                right: dist.vocab(),
            });
        }
        self.table.insert(context_hash(prefix, self.depth), dist);
        Ok(())
    }

    /// Materializes the distributions of `contexts` into the table.
    pub fn materialize(&mut self, contexts: &[Vec<TokenId>]) {
        for c in contexts {
            let d = self.next_dist(c);
            self.table.insert(context_hash(c, self.depth), d);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let o: TableOracle = serde_json::from_str(s)?;
        if o.fallback.vocab() != o.vocab || o.table.values().any(|d| d.vocab() != o.vocab) {
            return Err(Error::param("vocab", "table entries disagree with vocab"));
        }
        Ok(o)
    }
}

impl ModelOracle for TableOracle {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn next_dist(&self, prefix: &[TokenId]) -> ProbDist {
        let h = context_hash(prefix, self.depth);
        if let Some(d) = self.table.get(&h) {
            return d.clone();
        }
        match &self.generator {
            Some(g) => g.generate(self.vocab, h),
            None => self.fallback.clone(),
        }
    }
}

/// Target and draft oracles with a controlled greedy agreement rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementPair {
    pub target: TableOracle,
    pub draft: TableOracle,
    pub alpha: f64,
}

/// Random target; the draft agrees with its argmax on a fraction `alpha` of
/// contexts, chosen independently per context from `seed`.
pub fn make_pair(vocab: usize, depth: usize, alpha: f64, seed: u64) -> Result<AgreementPair> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} not in [0, 1]")));
    }
    let target = TableOracle::random(vocab, depth, seed)?;
    let mut draft = target.clone();
    draft.generator = Some(Generator::Agreement {
        base: Box::new(target.generator.clone().expect("random oracle has a generator")),
        alpha,
        seed: mix64(seed ^ 0xa11ce),
    });
    Ok(AgreementPair { target, draft, alpha })
}

impl AgreementPair {
    /// Fraction of `contexts` on which draft and target argmax agree.
    pub fn greedy_agreement(&self, contexts: &[Vec<TokenId>]) -> f64 {
        let hits = contexts
            .iter()
            .filter(|c| self.draft.next_dist(c).argmax() == self.target.next_dist(c).argmax())
            .count();
        hits as f64 / contexts.len() as f64
    }
}

/// Uniformly random contexts of length `len`.
pub fn random_contexts(vocab: usize, len: usize, count: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = SeededRng::new(seed, Stream::Data);
    (0..count)
        .map(|_| (0..len).map(|_| rng.rng().random_range(0..vocab as TokenId)).collect())
        .collect()
}

/// Round log where every draft token is accepted independently with
/// probability `alpha`. Full acceptance earns a bonus.
pub fn iid_round_log(alpha: f64, gamma: usize, rounds: usize, seed: u64) -> RoundLog {
    let mut rng = SeededRng::new(seed, Stream::Data);
    let rounds = (1..=rounds)
        .map(|round| {
            let accepted = (0..gamma)
                .position(|_| rng.rng().random::<f64>() >= alpha)
                .unwrap_or(gamma);
            RoundRecord {
                round,
                kind: RoundKind::Serial,
                gamma_used: gamma,
                accepted_count: accepted,
                emitted: accepted + 1,
                extra: Some(if accepted == gamma {
                    crate::serial::ExtraKind::Bonus
                } else {
                    crate::serial::ExtraKind::Correction
                }),
            }
        })
        .collect();
    RoundLog { rounds }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One static frame with a small patch sliding along fixed rows.
    StaticBackground,
    /// A patch moving diagonally over a slightly noisy background.
    MovingObject,
    /// Static letterbox rows at top and bottom whose keys attract attention,
    /// over a changing interior.
    BoundaryBias,
    /// Independent noise everywhere.
    UniformNoise,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "static_background" => Scenario::StaticBackground,
            "moving_object" => Scenario::MovingObject,
            "boundary_bias" => Scenario::BoundaryBias,
            "uniform_noise" => Scenario::UniformNoise,
            _ => return Err(Error::param("scenario", format!("unknown scenario {s:?}"))),
        })
    }
}

/// Knobs of the synthetic grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub layers: usize,
    pub heads: usize,
    pub text_len: usize,
    pub key_dim: usize,
    /// Patch height and width.
    pub patch: (usize, usize),
    /// Size of the shared query direction added to boundary-row keys.
    pub boundary_scale: f64,
    /// Per-frame noise on changing content.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            text_len: 4,
            key_dim: 8,
            patch: (2, 2),
            boundary_scale: 3.0,
            noise: 0.05,
        }
    }
}

/// First row of the sliding patch in [`Scenario::StaticBackground`].
pub fn patch_row(rows: usize, patch_h: usize) -> usize {
    rows.saturating_sub(patch_h) / 2
}

fn normals(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.rng().sample::<f32, _>(StandardNormal)).collect()
}

/// Grid and cross-attention inputs for `scenario`, deterministic in `seed`.
pub fn make_synthetic_grid(
    frames: usize,
    rows: usize,
    cols: usize,
    dim: usize,
    scenario: Scenario,
    seed: u64,
    params: &SceneParams,
) -> Result<(VisualTokenGrid, CrossAttentionInputs)> {
    for (name, v) in [
        ("frames", frames),
        ("rows", rows),
        ("cols", cols),
        ("dim", dim),
        ("layers", params.layers),
        ("heads", params.heads),
        ("text_len", params.text_len),
        ("key_dim", params.key_dim),
    ] {
        if v == 0 {
            return Err(Error::param(name, "must be at least 1"));
        }
    }
    let mut rng = SeededRng::new(seed, Stream::Data);
    let base = Array2::from_shape_vec((rows * cols, dim), normals(&mut rng, rows * cols * dim)).expect("shape matches");
    let patch_vec = Array1::from(normals(&mut rng, dim)) * 3.0;
    let (ph, pw) = (params.patch.0.min(rows), params.patch.1.min(cols));
    let mut emb = Array4::<f32>::zeros((frames, rows, cols, dim));
    let noise = params.noise as f32;
    for f in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                let n = r * cols + c;
                let border = r == 0 || r + 1 == rows;
                let jitter = match scenario {
                    Scenario::StaticBackground => 0.0,
                    Scenario::MovingObject => noise,
                    Scenario::BoundaryBias if border => 0.0,
                    Scenario::BoundaryBias => 1.0,
                    Scenario::UniformNoise => f32::NAN,
                };
                let fresh = normals(&mut rng, dim);
                for k in 0..dim {
                    emb[[f, r, c, k]] = if jitter.is_nan() {
                        fresh[k]
                    } else {
                        base[[n, k]] + jitter * fresh[k]
                    };
                }
            }
        }
        let patch_at = match scenario {
            Scenario::StaticBackground => Some((patch_row(rows, ph), (f % (cols - pw + 1)))),
            Scenario::MovingObject => Some((f % (rows - ph + 1), f % (cols - pw + 1))),
            _ => None,
        };
        if let Some((r0, c0)) = patch_at {
            for r in r0..r0 + ph {
                for c in c0..c0 + pw {
                    for k in 0..dim {
                        emb[[f, r, c, k]] = patch_vec[k];
                    }
                }
            }
        }
    }

    let (nl, nh, lt, dk) = (params.layers, params.heads, params.text_len, params.key_dim);
    let nv = frames * rows * cols;
    let mut queries = Array4::<f32>::zeros((nl, nh, lt, dk));
    let mut keys = Array4::<f32>::zeros((nl, nh, nv, dk));
    let inv_sqrt_d = 1.0 / (dim as f32).sqrt();
    for l in 0..nl {
        for h in 0..nh {
            let shared = normals(&mut rng, dk);
            let norm = shared.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
            for t in 0..lt {
                let jitter = normals(&mut rng, dk);
                for k in 0..dk {
                    queries[[l, h, t, k]] = shared[k] + 0.5 * jitter[k];
                }
            }
            let proj = Array2::from_shape_vec((dk, dim), normals(&mut rng, dk * dim)).expect("shape matches");
            for f in 0..frames {
                for r in 0..rows {
                    for c in 0..cols {
                        let n = (f * rows + r) * cols + c;
                        let e = emb.slice(ndarray::s![f, r, c, ..]);
                        let boost = scenario == Scenario::BoundaryBias && (r == 0 || r + 1 == rows);
                        for k in 0..dk {
                            let mut v = proj.row(k).dot(&e) * inv_sqrt_d;
                            if boost {
                                v += params.boundary_scale as f32 * shared[k] / norm * (dk as f32).sqrt();
                            }
                            keys[[l, h, n, k]] = v;
                        }
                    }
                }
            }
        }
    }
    Ok((VisualTokenGrid::new(emb)?, CrossAttentionInputs::new(queries, keys)?))
}
