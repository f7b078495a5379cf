//! Semantic-aware visual token preservation.
//!
//! Each token gets three scores:
//!
//! * **attention** – mean text-to-video cross-attention weight over layers,
//!   heads and text rows;
//! * **temporal** – one minus the mean cosine similarity with the token at the
//!   same position in adjacent frames;
//! * **spatial** – population variance of the token's similarity row inside
//!   its local crop.
//!
//! Scores are z-normalized per frame and per criterion, summed with equal
//! weights, and the global top-k tokens are retained.

use std::cmp::Ordering;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default crop side for the spatial score.
pub const DEFAULT_CROP_SIDE: usize = 5;
/// Default fraction of visual tokens kept.
pub const DEFAULT_KEEP_RATIO: f64 = 0.1;

/// Frame-major token embeddings, shape `(frames, rows, cols, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenGrid {
    emb: Array4<f32>,
}

impl VisualTokenGrid {
    pub fn new(emb: Array4<f32>) -> Result<Self> {
        let (f, r, c, d) = emb.dim();
        if f == 0 || r == 0 || c == 0 || d == 0 {
            return Err(Error::Shape(format!("empty grid {f}x{r}x{c}x{d}")));
        }
        if emb.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("non-finite embedding entry".into()));
        }
        Ok(Self { emb })
    }

    pub fn embeddings(&self) -> &Array4<f32> {
        &self.emb
    }

    pub fn dims(&self) -> GridDims {
        let (frames, rows, cols, _) = self.emb.dim();
        GridDims { frames, rows, cols }
    }

    pub fn dim(&self) -> usize {
        self.emb.dim().3
    }

    fn token(&self, f: usize, r: usize, c: usize) -> Vec<f64> {
        self.emb.slice(s![f, r, c, ..]).iter().map(|&x| x as f64).collect()
    }
}

/// Token-grid extents without the embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn tokens(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn flat(&self, idx: TokenIndex) -> usize {
        (idx.frame * self.rows + idx.row) * self.cols + idx.col
    }

    pub fn unflat(&self, flat: usize) -> TokenIndex {
        let col = flat % self.cols;
        let row = (flat / self.cols) % self.rows;
        let frame = flat / self.per_frame();
        TokenIndex { frame, row, col }
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.rows, self.cols)
    }
}

/// Text queries and visual keys per layer and head.
///
/// `queries` has shape `(layers, heads, text_len, key_dim)` and `keys` has
/// shape `(layers, heads, visual_tokens, key_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionInputs {
    queries: Array4<f32>,
    keys: Array4<f32>,
}

impl CrossAttentionInputs {
    pub fn new(queries: Array4<f32>, keys: Array4<f32>) -> Result<Self> {
        let (ql, qh, lt, qd) = queries.dim();
        let (kl, kh, nv, kd) = keys.dim();
        if (ql, qh, qd) != (kl, kh, kd) {
            return Err(Error::Shape(format!(
                "queries {:?} and keys {:?} disagree on layers/heads/key width",
                queries.dim(),
                keys.dim()
            )));
        }
        if ql == 0 || qh == 0 || lt == 0 || nv == 0 || qd == 0 {
            return Err(Error::Shape("empty attention inputs".into()));
        }
        Ok(Self { queries, keys })
    }

    pub fn queries(&self) -> &Array4<f32> {
        &self.queries
    }

    pub fn keys(&self) -> &Array4<f32> {
        &self.keys
    }

    pub fn layers(&self) -> usize {
        self.queries.dim().0
    }

    pub fn heads(&self) -> usize {
        self.queries.dim().1
    }

    pub fn text_len(&self) -> usize {
        self.queries.dim().2
    }

    pub fn visual_tokens(&self) -> usize {
        self.keys.dim().2
    }

    pub fn key_dim(&self) -> usize {
        self.queries.dim().3
    }

    /// Row-softmax of `Q Kᵀ / √d_k` for one layer and head, shape `(text_len, visual_tokens)`.
    pub fn attention_weights(&self, layer: usize, head: usize) -> Array2<f64> {
        let q = self.queries.slice(s![layer, head, .., ..]).mapv(f64::from);
        let k = self.keys.slice(s![layer, head, .., ..]).mapv(f64::from);
        let mut logits = q.dot(&k.t()) / (self.key_dim() as f64).sqrt();
        for mut row in logits.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        logits
    }
}

/// Global semantic relevance: mean attention weight per visual token.
pub fn score_attention(grid: &VisualTokenGrid, xattn: &CrossAttentionInputs) -> Result<Array3<f64>> {
    let dims = grid.dims();
    if xattn.visual_tokens() != dims.tokens() {
        return Err(Error::Shape(format!(
            "attention covers {} visual tokens, grid has {}",
            xattn.visual_tokens(),
            dims.tokens()
        )));
    }
    let mut acc = ndarray::Array1::<f64>::zeros(dims.tokens());
    for l in 0..xattn.layers() {
        for h in 0..xattn.heads() {
            acc += &xattn.attention_weights(l, h).sum_axis(Axis(0));
        }
    }
    acc /= (xattn.layers() * xattn.heads() * xattn.text_len()) as f64;
    Ok(acc.into_shape_with_order(dims.shape()).expect("token count checked"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Temporal redundancy: `1 - mean cosine` with same-position tokens in the
/// previous and next frame. A single-frame grid has no neighbours and scores 0.
pub fn score_temporal(grid: &VisualTokenGrid) -> Array3<f64> {
    let dims = grid.dims();
    let mut out = Array3::zeros(dims.shape());
    if dims.frames < 2 {
        return out;
    }
    for f in 0..dims.frames {
        let neighbours: Vec<usize> = [f.checked_sub(1), Some(f + 1)]
            .into_iter()
            .flatten()
            .filter(|&n| n < dims.frames)
            .collect();
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                let v = grid.token(f, r, c);
                let sim = neighbours
                    .iter()
                    .map(|&n| cosine(&v, &grid.token(n, r, c)))
                    .sum::<f64>()
                    / neighbours.len() as f64;
                out[[f, r, c]] = 1.0 - sim;
            }
        }
    }
    out
}

/// Spatial redundancy: per-token variance of its cosine-similarity row within
/// a non-overlapping `crop_side × crop_side` crop. Edge crops are smaller.
pub fn score_spatial(grid: &VisualTokenGrid, crop_side: usize) -> Result<Array3<f64>> {
    if crop_side == 0 {
        return Err(Error::param("crop_side", "must be at least 1"));
    }
    let dims = grid.dims();
    let mut out = Array3::zeros(dims.shape());
    for f in 0..dims.frames {
        for r0 in (0..dims.rows).step_by(crop_side) {
            for c0 in (0..dims.cols).step_by(crop_side) {
                let cells: Vec<(usize, usize)> = (r0..(r0 + crop_side).min(dims.rows))
                    .flat_map(|r| (c0..(c0 + crop_side).min(dims.cols)).map(move |c| (r, c)))
                    .collect();
                let unit: Vec<Vec<f64>> = cells.iter().map(|&(r, c)| normalized(grid.token(f, r, c))).collect();
                let m = unit.len() as f64;
                for (j, &(r, c)) in cells.iter().enumerate() {
                    let row: Vec<f64> = unit.iter().map(|u| dot(&unit[j], u)).collect();
                    let mean = row.iter().sum::<f64>() / m;
                    out[[f, r, c]] = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
                }
            }
        }
    }
    Ok(out)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// The three raw criteria, each shaped `(frames, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores {
    pub attn: Array3<f64>,
    pub temp: Array3<f64>,
    pub spa: Array3<f64>,
}

impl RawScores {
    pub fn compute(grid: &VisualTokenGrid, xattn: &CrossAttentionInputs, crop_side: usize) -> Result<Self> {
        Ok(Self {
            attn: score_attention(grid, xattn)?,
            temp: score_temporal(grid),
            spa: score_spatial(grid, crop_side)?,
        })
    }

    pub fn dims(&self) -> GridDims {
        let (frames, rows, cols) = self.attn.dim();
        GridDims { frames, rows, cols }
    }

    fn check(&self) -> Result<()> {
        if self.temp.dim() != self.attn.dim() || self.spa.dim() != self.attn.dim() {
            return Err(Error::Shape("score tensors disagree in shape".into()));
        }
        if self.attn.is_empty() {
            return Err(Error::Shape("empty score tensors".into()));
        }
        Ok(())
    }
}

/// Raw, per-frame normalized and fused scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub raw: RawScores,
    pub norm_attn: Array3<f64>,
    pub norm_temp: Array3<f64>,
    pub norm_spa: Array3<f64>,
    pub fused: Array3<f64>,
}

/// Spread below this fraction of a frame's largest magnitude is rounding
/// noise; such a frame counts as constant.
pub const CONSTANT_FRAME_RTOL: f64 = 1e-12;

/// Per-frame z-score with population std. A constant frame maps to zeros.
pub fn zscore_per_frame(scores: &Array3<f64>) -> Array3<f64> {
    let mut out = scores.clone();
    for mut frame in out.outer_iter_mut() {
        let n = frame.len() as f64;
        let mean = frame.sum() / n;
        let std = (frame.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = frame.iter().fold(0f64, |m, x| m.max(x.abs()));
        if std <= CONSTANT_FRAME_RTOL * scale {
            frame.fill(0.0);
        } else {
            frame.mapv_inplace(|x| (x - mean) / std);
        }
    }
    out
}

/// Position of a visual token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct TokenIndex {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

impl From<[usize; 3]> for TokenIndex {
    fn from([frame, row, col]: [usize; 3]) -> Self {
        Self { frame, row, col }
    }
}

impl From<TokenIndex> for [usize; 3] {
    fn from(t: TokenIndex) -> Self {
        [t.frame, t.row, t.col]
    }
}

/// Retained token positions, ascending in `(frame, row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepSet {
    pub dims: GridDims,
    pub keep_ratio: f64,
    pub indices: Vec<TokenIndex>,
}

impl KeepSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Sorted, unique and inside `dims`.
    pub fn validate(&self) -> Result<()> {
        for w in self.indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::IndexOutOfRange(format!(
                    "keep set not strictly ascending at {:?}",
                    w[1]
                )));
            }
        }
        if let Some(bad) = self
            .indices
            .iter()
            .find(|i| i.frame >= self.dims.frames || i.row >= self.dims.rows || i.col >= self.dims.cols)
        {
            return Err(Error::IndexOutOfRange(format!("{bad:?} in {:?}", self.dims)));
        }
        Ok(())
    }
}

/// `round(keep_ratio · n)` clamped to `[1, n]`.
pub fn keep_count(keep_ratio: f64, n: usize) -> Result<usize> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::param("keep_ratio", format!("{keep_ratio} not in (0, 1]")));
    }
    Ok(((keep_ratio * n as f64).round() as usize).clamp(1, n))
}

/// Global top-k by score; ties go to the lower flat index.
pub fn select_top_k(scores: &Array3<f64>, keep_ratio: f64) -> Result<KeepSet> {
    let (frames, rows, cols) = scores.dim();
    let dims = GridDims { frames, rows, cols };
    let k = keep_count(keep_ratio, dims.tokens())?;
    let flat: Vec<f64> = scores.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| match flat[b].total_cmp(&flat[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(KeepSet {
        dims,
        keep_ratio,
        indices: chosen.into_iter().map(|i| dims.unflat(i)).collect(),
    })
}

/// Normalize each criterion per frame, sum them, keep the top `keep_ratio`.
pub fn fuse_and_select(raw: RawScores, keep_ratio: f64) -> Result<(ScoreMap, KeepSet)> {
    raw.check()?;
    let norm_attn = zscore_per_frame(&raw.attn);
    let norm_temp = zscore_per_frame(&raw.temp);
    let norm_spa = zscore_per_frame(&raw.spa);
    let fused = &norm_attn + &norm_spa + &norm_temp;
    let keep = select_top_k(&fused, keep_ratio)?;
    Ok((
        ScoreMap {
            raw,
            norm_attn,
            norm_temp,
            norm_spa,
            fused,
        },
        keep,
    ))
}

/// Scores a grid end to end and picks the tokens to keep.
pub fn preserve(
    grid: &VisualTokenGrid,
    xattn: &CrossAttentionInputs,
    keep_ratio: f64,
    crop_side: usize,
) -> Result<(ScoreMap, KeepSet)> {
    fuse_and_select(RawScores::compute(grid, xattn, crop_side)?, keep_ratio)
}

/// A retained embedding with its original position.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedToken {
    pub index: TokenIndex,
    pub embedding: Vec<f32>,
}

/// Retained embeddings in ascending `(frame, row, col)` order.
pub fn prune_grid(grid: &VisualTokenGrid, keep: &KeepSet) -> Result<Vec<PrunedToken>> {
    if keep.dims != grid.dims() {
        return Err(Error::Shape(format!(
            "keep set for {:?}, grid is {:?}",
            keep.dims,
            grid.dims()
        )));
    }
    keep.validate()?;
    Ok(keep
        .indices
        .iter()
        .map(|&index| PrunedToken {
            index,
            embedding: grid.emb.slice(s![index.frame, index.row, index.col, ..]).to_vec(),
        })
        .collect())
}

/// View of one frame of a score tensor, handy for reports.
pub fn frame_view(scores: &Array3<f64>, frame: usize) -> ArrayView2<'_, f64> {
    scores.index_axis(Axis(0), frame)
}
