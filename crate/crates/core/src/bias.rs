//! Position-bias statistics for a selected token set.
//!
//! A token is a *boundary* token when its row center, measured as
//! `(row + 0.5) / rows`, lies within `band` of the top or bottom edge.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preserve::{GridDims, KeepSet};

/// Default normalized band width.
pub const DEFAULT_BAND: f64 = 0.1;

/// Which frame edges count as boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandSides {
    #[default]
    TopBottom,
    /// Also the left and right edges, using column centers.
    FourSided,
}

fn in_band(i: usize, n: usize, band: f64) -> bool {
    let center = (i as f64 + 0.5) / n as f64;
    center < band || center > 1.0 - band
}

fn check_band(band: f64) -> Result<()> {
    if !(band > 0.0 && band < 0.5) {
        return Err(Error::param("band", format!("{band} not in (0, 0.5)")));
    }
    Ok(())
}

/// Boolean `rows × cols` boundary mask.
pub fn classify_boundary(rows: usize, cols: usize, band: f64, sides: BandSides) -> Result<Array2<bool>> {
    check_band(band)?;
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        in_band(r, rows, band) || (sides == BandSides::FourSided && in_band(c, cols, band))
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameShare {
    pub frame: usize,
    pub selected: usize,
    pub boundary_selected: usize,
    /// `None` when nothing was selected in this frame.
    pub share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub band: f64,
    pub sides: BandSides,
    pub frames: Vec<FrameShare>,
    /// Pooled share: boundary selections over all selections. Equals the
    /// selection-weighted mean of the per-frame shares.
    pub overall_share: f64,
    /// Unweighted mean over frames that have a selection.
    pub mean_frame_share: f64,
    pub max_frame_share: f64,
    /// Fraction of all grid tokens that are boundary tokens.
    pub boundary_fraction_of_grid: f64,
}

impl BiasReport {
    pub fn per_frame_boundary_share(&self) -> Vec<Option<f64>> {
        self.frames.iter().map(|f| f.share).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", crate::CSV_VERSION)?;
        writeln!(out, "frame_index,selected,boundary_selected,share")?;
        for f in &self.frames {
            match f.share {
                Some(s) => writeln!(out, "{},{},{},{}", f.frame, f.selected, f.boundary_selected, s)?,
                None => writeln!(out, "{},{},{},", f.frame, f.selected, f.boundary_selected)?,
            }
        }
        Ok(())
    }
}

pub fn bias_report(keep: &KeepSet, band: f64, sides: BandSides) -> Result<BiasReport> {
    if keep.is_empty() {
        return Err(Error::param("keep", "empty selection"));
    }
    keep.validate()?;
    let GridDims { frames, rows, cols } = keep.dims;
    let mask = classify_boundary(rows, cols, band, sides)?;
    let mut per = vec![(0usize, 0usize); frames];
    for idx in &keep.indices {
        per[idx.frame].0 += 1;
        if mask[[idx.row, idx.col]] {
            per[idx.frame].1 += 1;
        }
    }
    let frames_out: Vec<FrameShare> = per
        .iter()
        .enumerate()
        .map(|(frame, &(selected, boundary_selected))| FrameShare {
            frame,
            selected,
            boundary_selected,
            share: (selected > 0).then(|| boundary_selected as f64 / selected as f64),
        })
        .collect();
    let total: usize = per.iter().map(|p| p.0).sum();
    let boundary: usize = per.iter().map(|p| p.1).sum();
    let shares: Vec<f64> = frames_out.iter().filter_map(|f| f.share).collect();
    Ok(BiasReport {
        band,
        sides,
        overall_share: boundary as f64 / total as f64,
        mean_frame_share: shares.iter().sum::<f64>() / shares.len() as f64,
        max_frame_share: shares.iter().copied().fold(0.0, f64::max),
        boundary_fraction_of_grid: mask.iter().filter(|b| **b).count() as f64 / mask.len() as f64,
        frames: frames_out,
    })
}
