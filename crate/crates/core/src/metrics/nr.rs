//! Block-based no-reference quality score (lower is better).
//!
//! The slice is tiled with 16x16 blocks (a remainder strip is ignored). A
//! block is active when its standard deviation reaches 0.005. Each active
//! block gets a distortion
//!
//! `d = clamp(0.5 * blockiness + 0.5 * noise_term, 0, 1)`
//!
//! * `blockiness`: mean absolute second difference normal to the block's
//!   outer boundary (the two pixel columns/rows straddling every edge that
//!   has a neighbour block), divided by the mean absolute second difference
//!   inside the block, minus one, clamped to `[0, 1]`. Texture that is as
//!   curved at the boundary as inside scores 0; a seam scores up to 1.
//! * `noise_term`: energy of the 5-point Laplacian over energy of the
//!   forward-difference gradient, divided by 5 (the value of that ratio for
//!   white noise) and clamped to `[0, 1]`.
//!
//! The slice score is `100 * (sum d + 1) / (N_active + 1)`.

use crate::error::{Error, Result};
use crate::image::Image2D;

pub const BLOCK: usize = 16;
pub const ACTIVE_STD: f64 = 0.005;
const WHITE_NOISE_RATIO: f64 = 5.0;
const TINY: f64 = 1e-12;

/// Per-block terms, exposed for inspection and tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockTerms {
    pub row: usize,
    pub col: usize,
    pub std: f64,
    pub blockiness: f64,
    pub noise_term: f64,
    pub distortion: f64,
}

impl BlockTerms {
    pub fn active(&self) -> bool {
        self.std >= ACTIVE_STD
    }
}

fn block_std(img: &Image2D, r0: usize, c0: usize) -> f64 {
    let mut s = 0.0;
    let mut s2 = 0.0;
    for r in r0..r0 + BLOCK {
        for c in c0..c0 + BLOCK {
            let v = img.get(r, c);
            s += v;
            s2 += v * v;
        }
    }
    let n = (BLOCK * BLOCK) as f64;
    let mean = s / n;
    (s2 / n - mean * mean).max(0.0).sqrt()
}

fn d2_h(img: &Image2D, r: usize, c: usize) -> f64 {
    (img.get(r, c - 1) - 2.0 * img.get(r, c) + img.get(r, c + 1)).abs()
}

fn d2_v(img: &Image2D, r: usize, c: usize) -> f64 {
    (img.get(r - 1, c) - 2.0 * img.get(r, c) + img.get(r + 1, c)).abs()
}

fn blockiness(img: &Image2D, r0: usize, c0: usize) -> f64 {
    let (h, w) = (img.rows(), img.cols());
    let (r1, c1) = (r0 + BLOCK - 1, c0 + BLOCK - 1);
    let mut edge = 0.0;
    let mut n_edge = 0usize;
    for r in r0..=r1 {
        if c0 > 0 {
            edge += d2_h(img, r, c0 - 1) + if c0 + 1 < w { d2_h(img, r, c0) } else { 0.0 };
            n_edge += 2;
        }
        if c1 + 1 < w {
            edge += d2_h(img, r, c1) + if c1 + 2 < w { d2_h(img, r, c1 + 1) } else { 0.0 };
            n_edge += 2;
        }
    }
    for c in c0..=c1 {
        if r0 > 0 {
            edge += d2_v(img, r0 - 1, c) + if r0 + 1 < h { d2_v(img, r0, c) } else { 0.0 };
            n_edge += 2;
        }
        if r1 + 1 < h {
            edge += d2_v(img, r1, c) + if r1 + 2 < h { d2_v(img, r1 + 1, c) } else { 0.0 };
            n_edge += 2;
        }
    }
    if n_edge == 0 {
        return 0.0;
    }
    let mut inner = 0.0;
    let mut n_inner = 0usize;
    for r in r0..=r1 {
        for c in c0 + 1..c1 {
            inner += d2_h(img, r, c);
            n_inner += 1;
        }
    }
    for r in r0 + 1..r1 {
        for c in c0..=c1 {
            inner += d2_v(img, r, c);
            n_inner += 1;
        }
    }
    let ratio = (edge / n_edge as f64) / (inner / n_inner as f64 + TINY);
    (ratio - 1.0).clamp(0.0, 1.0)
}

fn noise_term(img: &Image2D, r0: usize, c0: usize) -> f64 {
    let (h, w) = (img.rows(), img.cols());
    let mut lap = 0.0;
    let mut grad = 0.0;
    for r in r0..r0 + BLOCK {
        for c in c0..c0 + BLOCK {
            let v = img.get(r, c);
            if r > 0 && c > 0 && r + 1 < h && c + 1 < w {
                let l = img.get(r - 1, c) + img.get(r + 1, c) + img.get(r, c - 1)
                    + img.get(r, c + 1)
                    - 4.0 * v;
                lap += l * l;
            }
            if c + 1 < w {
                grad += (img.get(r, c + 1) - v).powi(2);
            }
            if r + 1 < h {
                grad += (img.get(r + 1, c) - v).powi(2);
            }
        }
    }
    if grad <= TINY {
        return 0.0;
    }
    (lap / grad / WHITE_NOISE_RATIO).clamp(0.0, 1.0)
}

/// Terms of every full block, row-major.
pub fn block_terms(img: &Image2D) -> Result<Vec<BlockTerms>> {
    if img.rows() < 2 * BLOCK || img.cols() < 2 * BLOCK {
        return Err(Error::InvalidArgument(format!(
            "no-reference score needs at least a 32x32 slice, got {}x{}",
            img.rows(),
            img.cols()
        )));
    }
    let mut out = Vec::new();
    for br in 0..img.rows() / BLOCK {
        for bc in 0..img.cols() / BLOCK {
            let (r0, c0) = (br * BLOCK, bc * BLOCK);
            let std = block_std(img, r0, c0);
            let (b, n) = if std >= ACTIVE_STD {
                (blockiness(img, r0, c0), noise_term(img, r0, c0))
            } else {
                (0.0, 0.0)
            };
            out.push(BlockTerms {
                row: r0,
                col: c0,
                std,
                blockiness: b,
                noise_term: n,
                distortion: (0.5 * b + 0.5 * n).clamp(0.0, 1.0),
            });
        }
    }
    Ok(out)
}

/// Pools per-block distortions of the active blocks.
pub fn pool_score(distortions: &[f64]) -> f64 {
    100.0 * (distortions.iter().sum::<f64>() + 1.0) / (distortions.len() as f64 + 1.0)
}

/// Score of one slice with intensities on a `[0, 1]` scale.
pub fn nr_score(img: &Image2D) -> Result<f64> {
    let d: Vec<f64> = block_terms(img)?
        .iter()
        .filter(|b| b.active())
        .map(|b| b.distortion)
        .collect();
    Ok(pool_score(&d))
}
