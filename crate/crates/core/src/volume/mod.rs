//! Anisotropic 3-D volumes: storage, normalization, through-plane
//! resampling, plane slicing and synthetic phantoms.
//!
//! Axis convention: index `(i0, i1, i2)` with axis 2 varying fastest. For
//! anatomical data axis 0 runs left-right, axis 1 anterior-posterior and
//! axis 2 superior-inferior, so a coronal acquisition has `lr_axis == 1`.

mod io;
mod phantom;
mod spline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;

pub use io::{load_volume, save_volume, sidecar_path, VolumeHeader, VOLUME_FORMAT_VERSION};
pub use phantom::{generate_phantom, random_phantom_spec, Phantom, PhantomSpec, Primitive};
pub use spline::{linear_resample_line, natural_spline_second_derivatives, resample_line};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    lr_axis: usize,
    intensity_range: (f64, f64),
}

/// Axis with the largest spacing; ties resolve to the highest index.
pub fn infer_lr_axis(spacing: [f64; 3]) -> usize {
    let mut best = 2;
    for a in (0..2).rev() {
        if spacing[a] > spacing[best] {
            best = a;
        }
    }
    best
}

fn value_range(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

impl Volume3D {
    /// Builds a volume, inferring the low-resolution axis from the spacing
    /// and recording the data range as the intensity range.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        let lr_axis = infer_lr_axis(spacing);
        let range = value_range(&data);
        Self::with_meta(dims, spacing, data, lr_axis, range)
    }

    pub fn with_meta(
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f64>,
        lr_axis: usize,
        intensity_range: (f64, f64),
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("volume dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "volume spacing {spacing:?} must be positive and finite"
            )));
        }
        if lr_axis > 2 {
            return Err(Error::InvalidArgument(format!("lr_axis {lr_axis} is not 0, 1 or 2")));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::shape(
                "volume",
                format!("dims {dims:?} need {n} voxels, got {}", data.len()),
            ));
        }
        Ok(Volume3D {
            dims,
            spacing,
            data,
            lr_axis,
            intensity_range,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn lr_axis(&self) -> usize {
        self.lr_axis
    }

    pub fn intensity_range(&self) -> (f64, f64) {
        self.intensity_range
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.dims[1] + i[1]) * self.dims[2] + i[2]
    }

    #[inline]
    pub fn get(&self, i: [usize; 3]) -> f64 {
        self.data[self.index(i)]
    }

    /// Same geometry and metadata, new voxel values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::with_meta(self.dims, self.spacing, data, self.lr_axis, self.intensity_range)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// The two axes other than `lr_axis`, in increasing order.
    pub fn in_plane_axes(&self) -> [usize; 2] {
        in_plane_axes(self.lr_axis)
    }

    /// Through-plane over in-plane spacing ratio.
    pub fn anisotropy(&self) -> f64 {
        let [p, q] = self.in_plane_axes();
        self.spacing[self.lr_axis] / self.spacing[p].min(self.spacing[q])
    }

    /// Trilinear interpolation at a continuous voxel-index position, with
    /// coordinates clamped to the grid.
    pub fn sample_trilinear(&self, pos: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let p = pos[a].clamp(0.0, max);
            let f = p.floor().min((self.dims[a].max(2) - 2) as f64).max(0.0);
            lo[a] = f as usize;
            frac[a] = if self.dims[a] == 1 { 0.0 } else { p - f };
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                idx[a] = (lo[a] + bit).min(self.dims[a] - 1);
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.get(idx);
            }
        }
        acc
    }
}

fn in_plane_axes(lr_axis: usize) -> [usize; 2] {
    match lr_axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

/// Slicing orientation relative to the low-resolution axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    /// Normal to the low-resolution axis: the acquired plane.
    Hr,
    /// Contains the low-resolution axis; normal to the lower in-plane axis.
    LrPrimary,
    /// Contains the low-resolution axis; normal to the higher in-plane axis.
    LrSecondary,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Hr, Plane::LrPrimary, Plane::LrSecondary];

    pub fn normal_axis(self, lr_axis: usize) -> usize {
        let [p, q] = in_plane_axes(lr_axis);
        match self {
            Plane::Hr => lr_axis,
            Plane::LrPrimary => p,
            Plane::LrSecondary => q,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Hr => "hr",
            Plane::LrPrimary => "lr_primary",
            Plane::LrSecondary => "lr_secondary",
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hr" => Ok(Plane::Hr),
            "lr_primary" => Ok(Plane::LrPrimary),
            "lr_secondary" => Ok(Plane::LrSecondary),
            other => Err(Error::InvalidArgument(format!(
                "unknown plane '{other}' (expected hr, lr_primary or lr_secondary)"
            ))),
        }
    }
}

/// Axes of a slice image: (normal, row axis, column axis).
fn slice_axes(plane: Plane, lr_axis: usize) -> (usize, usize, usize) {
    let normal = plane.normal_axis(lr_axis);
    let (r, c) = match normal {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    (normal, r, c)
}

/// Slices along the plane normal in index order. Image rows follow the
/// lower-index remaining axis, columns the higher one.
pub fn extract_slices(v: &Volume3D, plane: Plane) -> Vec<Image2D> {
    let (normal, ra, ca) = slice_axes(plane, v.lr_axis);
    (0..v.dims[normal])
        .map(|s| {
            Image2D::from_fn(v.dims[ra], v.dims[ca], |r, c| {
                let mut idx = [0; 3];
                idx[normal] = s;
                idx[ra] = r;
                idx[ca] = c;
                v.get(idx)
            })
        })
        .collect()
}

/// Inverse of [`extract_slices`]: writes the slices into a copy of `like`.
pub fn assemble_slices(like: &Volume3D, plane: Plane, slices: &[Image2D]) -> Result<Volume3D> {
    let (normal, ra, ca) = slice_axes(plane, like.lr_axis);
    if slices.len() != like.dims[normal] {
        return Err(Error::shape(
            "assemble_slices",
            format!("expected {} slices, got {}", like.dims[normal], slices.len()),
        ));
    }
    let mut data = vec![0.0; like.len()];
    for (s, im) in slices.iter().enumerate() {
        if (im.rows(), im.cols()) != (like.dims[ra], like.dims[ca]) {
            return Err(Error::shape(
                "assemble_slices",
                format!(
                    "slice {s} is {}x{}, expected {}x{}",
                    im.rows(),
                    im.cols(),
                    like.dims[ra],
                    like.dims[ca]
                ),
            ));
        }
        for r in 0..im.rows() {
            for c in 0..im.cols() {
                let mut idx = [0; 3];
                idx[normal] = s;
                idx[ra] = r;
                idx[ca] = c;
                data[like.index(idx)] = im.get(r, c);
            }
        }
    }
    like.with_data(data)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = rank - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub volume: Volume3D,
    /// Set when the percentile window collapsed and the output is all zeros.
    pub constant: bool,
}

/// Clips to the `[lo_pct, hi_pct]` percentile window and maps it affinely
/// onto `[-1, 1]`. The window is stored as the intensity range so that
/// [`denormalize_intensity`] can undo the mapping.
pub fn normalize_intensity(v: &Volume3D, lo_pct: f64, hi_pct: f64) -> Result<Normalized> {
    if !(0.0..100.0).contains(&lo_pct) || !(lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    let mut sorted = v.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, lo_pct);
    let hi = percentile(&sorted, hi_pct);
    let constant = hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0);
    let data = if constant {
        log::warn!("constant volume: normalized intensities set to zero");
        vec![0.0; v.len()]
    } else {
        v.data
            .iter()
            .map(|&x| 2.0 * (x.clamp(lo, hi) - lo) / (hi - lo) - 1.0)
            .collect()
    };
    let volume = Volume3D::with_meta(v.dims, v.spacing, data, v.lr_axis, (lo, hi))?;
    Ok(Normalized { volume, constant })
}

/// Maps `[-1, 1]` back onto the recorded intensity range.
pub fn denormalize_intensity(v: &Volume3D) -> Volume3D {
    let (lo, hi) = v.intensity_range;
    let data = v.data.iter().map(|&x| lo + (x + 1.0) * 0.5 * (hi - lo)).collect();
    Volume3D {
        data,
        ..v.clone()
    }
}

/// Resamples the low-resolution axis to the finest in-plane spacing with a
/// natural cubic spline. Voxel `i` is centered at `(i + 0.5) * spacing`; the
/// new count is `round(extent / new_spacing)`. Lines with fewer than four
/// samples fall back to linear interpolation.
pub fn resample_to_isotropic(v: &Volume3D) -> Result<Volume3D> {
    let lr = v.lr_axis;
    let [p, q] = v.in_plane_axes();
    let target = v.spacing[p].min(v.spacing[q]);
    let old = v.spacing[lr];
    if old == target {
        return Ok(v.clone());
    }
    let n_old = v.dims[lr];
    let n_new = ((n_old as f64 * old / target).round() as usize).max(1);
    // Output sample positions in units of old voxel index.
    let positions: Vec<f64> = (0..n_new)
        .map(|j| (j as f64 + 0.5) * target / old - 0.5)
        .collect();
    let linear = n_old < 4;
    if linear {
        log::warn!("only {n_old} samples along the low-resolution axis: using linear interpolation");
    }

    let mut dims = v.dims;
    dims[lr] = n_new;
    let mut spacing = v.spacing;
    spacing[lr] = target;
    let mut data = vec![0.0; dims.iter().product()];
    let stride_old = |a: usize| -> usize { v.dims[a + 1..].iter().product() };
    let stride_new = |a: usize| -> usize { dims[a + 1..].iter().product() };
    let (so, sn) = (stride_old(lr), stride_new(lr));
    let mut line = vec![0.0; n_old];
    let mut out = vec![0.0; n_new];
    for a in 0..v.dims[p] {
        for b in 0..v.dims[q] {
            let mut base_idx = [0; 3];
            base_idx[p] = a;
            base_idx[q] = b;
            let base_old = v.index(base_idx);
            let base_new = (base_idx[0] * dims[1] + base_idx[1]) * dims[2] + base_idx[2];
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = v.data[base_old + k * so];
            }
            if linear {
                linear_resample_line(&line, &positions, &mut out);
            } else {
                resample_line(&line, &positions, &mut out);
            }
            for (k, &val) in out.iter().enumerate() {
                data[base_new + k * sn] = val;
            }
        }
    }
    Volume3D::with_meta(dims, spacing, data, lr, v.intensity_range)
}
