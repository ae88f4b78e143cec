//! Line profiles, Savitzky-Golay smoothing and edge sharpness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{PhantomSpec, Volume3D};

/// Window-5, order-3 smoothing kernel.
pub const SAVGOL_KERNEL: [f64; 5] = [-3.0 / 35.0, 12.0 / 35.0, 17.0 / 35.0, 12.0 / 35.0, -3.0 / 35.0];
pub const SAVGOL_WINDOW: usize = 5;
pub const MIN_PROFILE_LEN: usize = 7;
pub const PHANTOM_PROFILE_LEN: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineProfile {
    pub samples: Vec<f64>,
    pub spacing_mm: f64,
    /// Voxel-index coordinates of the first and last sample.
    pub start: [f64; 3],
    pub end: [f64; 3],
}

impl LineProfile {
    /// Profile with no geometry attached.
    pub fn new(samples: Vec<f64>, spacing_mm: f64) -> Result<Self> {
        if !(spacing_mm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "profile spacing must be positive, got {spacing_mm}"
            )));
        }
        Ok(LineProfile {
            samples,
            spacing_mm,
            start: [0.0; 3],
            end: [0.0; 3],
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Rows of the hat matrix of a least-squares cubic over positions 0..5,
/// evaluated at positions 0 and 1. Used for the two samples at either end.
fn edge_weights() -> [[f64; 5]; 2] {
    // Normal equations A^T A c = A^T e_j for each unit sample e_j.
    let mut gram = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            gram[i][j] = (0..5).map(|t| (t as f64).powi((i + j) as i32)).sum();
        }
    }
    let inv = invert4(gram);
    let mut out = [[0.0; 5]; 2];
    for (row, &at) in out.iter_mut().zip(&[0.0f64, 1.0]) {
        for (j, w) in row.iter_mut().enumerate() {
            // coefficients c = inv * A^T e_j, A^T e_j = [1, j, j^2, j^3]
            let rhs = [1.0, j as f64, (j * j) as f64, (j * j * j) as f64];
            let mut val = 0.0;
            for p in 0..4 {
                let c: f64 = (0..4).map(|q| inv[p][q] * rhs[q]).sum();
                val += c * at.powi(p as i32);
            }
            *w = val;
        }
    }
    out
}

fn invert4(m: [[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut a = [[0.0; 8]; 4];
    for i in 0..4 {
        a[i][..4].copy_from_slice(&m[i]);
        a[i][4 + i] = 1.0;
    }
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..4 {
            if r != col {
                let f = a[r][col];
                let src = a[col];
                for (v, s) in a[r].iter_mut().zip(src) {
                    *v -= f * s;
                }
            }
        }
    }
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        out[i].copy_from_slice(&a[i][4..]);
    }
    out
}

/// Window-5 cubic Savitzky-Golay smoothing. The two samples at each end are
/// the value of the cubic fitted to the first (last) five samples.
pub fn savgol_filter(profile: &LineProfile) -> Result<LineProfile> {
    let y = &profile.samples;
    let n = y.len();
    if n < SAVGOL_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "smoothing needs at least {SAVGOL_WINDOW} samples, got {n}"
        )));
    }
    let mut out = vec![0.0; n];
    for i in 2..n - 2 {
        out[i] = (0..5).map(|k| SAVGOL_KERNEL[k] * y[i + k - 2]).sum();
    }
    let w = edge_weights();
    for e in 0..2 {
        out[e] = (0..5).map(|k| w[e][k] * y[k]).sum();
        out[n - 1 - e] = (0..5).map(|k| w[e][k] * y[n - 1 - k]).sum();
    }
    Ok(LineProfile {
        samples: out,
        ..profile.clone()
    })
}

/// Maximum absolute central-difference gradient (per mm) of the smoothed
/// profile.
pub fn edge_sharpness(profile: &LineProfile) -> Result<f64> {
    if profile.len() < MIN_PROFILE_LEN {
        return Err(Error::InvalidArgument(format!(
            "edge sharpness needs at least {MIN_PROFILE_LEN} samples, got {}",
            profile.len()
        )));
    }
    let s = savgol_filter(profile)?.samples;
    Ok((1..s.len() - 1)
        .map(|i| ((s[i + 1] - s[i - 1]) / (2.0 * profile.spacing_mm)).abs())
        .fold(0.0, f64::max))
}

/// Profiles along the low-resolution axis through both poles of every
/// primitive of a phantom, sampled from `volume` (which shares the phantom's
/// physical extent). Profiles that would leave the volume are skipped.
pub fn phantom_edge_profiles(spec: &PhantomSpec, volume: &Volume3D, len: usize) -> Vec<LineProfile> {
    let axis = spec.lr_axis();
    let spacing = volume.spacing();
    let dims = volume.dims();
    let step = spacing[axis];
    let mut out = Vec::new();
    for prim in &spec.primitives {
        let (center, half) = (prim.center(), prim.radii()[axis]);
        for sign in [-1.0, 1.0] {
            let mut pole = center;
            pole[axis] += sign * half;
            let idx = |mm: [f64; 3]| -> [f64; 3] {
                [0, 1, 2].map(|a| mm[a] / spacing[a] - 0.5)
            };
            let mut start_mm = pole;
            start_mm[axis] -= step * (len as f64 - 1.0) / 2.0;
            let start = idx(start_mm);
            let mut end = start;
            end[axis] += len as f64 - 1.0;
            let inside = (0..3).all(|a| {
                start[a] >= 0.0
                    && end[a] >= 0.0
                    && start[a] <= (dims[a] - 1) as f64
                    && end[a] <= (dims[a] - 1) as f64
            });
            if !inside {
                continue;
            }
            let samples = (0..len)
                .map(|k| {
                    let mut p = start;
                    p[axis] += k as f64;
                    volume.sample_trilinear(p)
                })
                .collect();
            out.push(LineProfile {
                samples,
                spacing_mm: step,
                start,
                end,
            });
        }
    }
    out
}
