//! Failure-mode detectors: collapsed generators and patch-grid seams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::inference::PatchMapper;
use crate::metrics::to_unit_range;
use crate::patchwork::{PatchGrid, PATCH};
use crate::volume::{extract_slices, Plane, Volume3D};

pub const MIN_PROBES: usize = 16;
/// Output spread below this fraction of the input spread counts as collapse.
pub const COLLAPSE_RATIO: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub input_distance: f64,
    pub output_distance: f64,
    pub ratio: f64,
    pub collapsed: bool,
}

/// Mean over all unordered pairs of the per-pixel mean absolute difference.
pub fn mean_pairwise_l1(images: &[Image2D]) -> f64 {
    let n = images.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let a = images[i].data();
            let b = images[j].data();
            acc += a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        }
    }
    acc / (n * (n - 1) / 2) as f64
}

/// Flags a mapper whose outputs are nearly identical for distinct probes.
pub fn detect_mode_collapse(mapper: &dyn PatchMapper, probes: &[Image2D]) -> Result<CollapseReport> {
    if probes.len() < MIN_PROBES {
        return Err(Error::InvalidArgument(format!(
            "mode-collapse check needs at least {MIN_PROBES} probes, got {}",
            probes.len()
        )));
    }
    let input_distance = mean_pairwise_l1(probes);
    if !(input_distance > 0.0) {
        return Err(Error::InvalidArgument("probe patches are all identical".into()));
    }
    let outputs = mapper.map_patches(probes)?;
    let output_distance = mean_pairwise_l1(&outputs);
    let ratio = output_distance / input_distance;
    Ok(CollapseReport {
        input_distance,
        output_distance,
        ratio,
        collapsed: ratio < COLLAPSE_RATIO,
    })
}

/// Mean |second difference| at interior index `c` along the fast axis of
/// `len` samples, over `lines` lines.
fn axis_profile(lines: usize, len: usize, at: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    (1..len - 1)
        .map(|c| {
            (0..lines)
                .map(|r| (at(r, c - 1) - 2.0 * at(r, c) + at(r, c + 1)).abs())
                .sum::<f64>()
                / lines as f64
        })
        .collect()
}

fn axis_score(profile: &[f64], len: usize, origins: &[usize]) -> f64 {
    let mut boundary = vec![false; len];
    for &o in origins {
        if o > 0 {
            boundary[o] = true;
        }
        if o + PATCH - 1 < len - 1 {
            boundary[o + PATCH - 1] = true;
        }
    }
    let (mut b, mut nb, mut o, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (i, &s) in profile.iter().enumerate() {
        if boundary[i + 1] {
            b += s;
            nb += 1;
        } else {
            o += s;
            no += 1;
        }
    }
    if nb == 0 || no == 0 {
        return 0.0;
    }
    b / nb as f64 - o / no as f64
}

/// Mean |second difference| on the columns (rows) where a patch starts or
/// ends, minus the same on all other interior columns (rows); the two
/// directions are averaged. Positive values mean grid-aligned seams.
pub fn detect_block_artifacts(slice: &Image2D, grid: &PatchGrid) -> Result<f64> {
    if (slice.rows(), slice.cols()) != (grid.rows(), grid.cols()) {
        return Err(Error::shape(
            "block artifacts",
            format!(
                "{}x{} slice for a {}x{} grid",
                slice.rows(),
                slice.cols(),
                grid.rows(),
                grid.cols()
            ),
        ));
    }
    let (h, w) = (slice.rows(), slice.cols());
    let mut col_origins: Vec<usize> = grid.origins().iter().map(|o| o.1).collect();
    let mut row_origins: Vec<usize> = grid.origins().iter().map(|o| o.0).collect();
    col_origins.dedup();
    row_origins.sort_unstable();
    row_origins.dedup();
    col_origins.sort_unstable();
    col_origins.dedup();
    let cols = axis_profile(h, w, |r, c| slice.get(r, c));
    let rows = axis_profile(w, h, |c, r| slice.get(r, c));
    Ok(0.5 * (axis_score(&cols, w, &col_origins) + axis_score(&rows, h, &row_origins)))
}

/// Mean seam score over the slices of one plane, intensities mapped to
/// `[0, 1]` through `range`.
pub fn block_artifact_score_volume(
    v: &Volume3D,
    plane: Plane,
    stride: usize,
    range: (f64, f64),
) -> Result<f64> {
    let slices = extract_slices(v, plane);
    let grid = PatchGrid::new(slices[0].rows(), slices[0].cols(), stride)?;
    let mut acc = 0.0;
    for s in &slices {
        acc += detect_block_artifacts(&to_unit_range(s, range), &grid)?;
    }
    Ok(acc / slices.len() as f64)
}
