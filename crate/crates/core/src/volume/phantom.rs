//! Synthetic phantoms: analytic ellipsoids and boxes rendered on an
//! isotropic grid, then block-averaged along the low-resolution axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{infer_lr_axis, in_plane_axes, Volume3D};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned ellipsoid with semi-axes `radii`.
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        intensity: f64,
    },
    /// Axis-aligned box with half-extents `radii`.
    Slab {
        center: [f64; 3],
        radii: [f64; 3],
        intensity: f64,
    },
}

impl Primitive {
    pub fn center(&self) -> [f64; 3] {
        match self {
            Primitive::Ellipsoid { center, .. } | Primitive::Slab { center, .. } => *center,
        }
    }

    pub fn radii(&self) -> [f64; 3] {
        match self {
            Primitive::Ellipsoid { radii, .. } | Primitive::Slab { radii, .. } => *radii,
        }
    }

    pub fn intensity(&self) -> f64 {
        match self {
            Primitive::Ellipsoid { intensity, .. } | Primitive::Slab { intensity, .. } => *intensity,
        }
    }

    /// Signed distance in mm (negative inside). Exact for boxes; for
    /// ellipsoids the first-order estimate `(rho - 1) / |grad rho|`.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let c = self.center();
        let r = self.radii();
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        match self {
            Primitive::Ellipsoid { .. } => {
                let rho = (0..3).map(|a| (d[a] / r[a]).powi(2)).sum::<f64>().sqrt();
                if rho == 0.0 {
                    return -r.iter().cloned().fold(f64::INFINITY, f64::min);
                }
                let grad = (0..3)
                    .map(|a| (d[a] / (r[a] * r[a])).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / rho;
                (rho - 1.0) / grad
            }
            Primitive::Slab { .. } => {
                let q: Vec<f64> = (0..3).map(|a| d[a].abs() - r[a]).collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0);
                outside + inside
            }
        }
    }
}

/// Phantom description. `dims` is the high-resolution grid; `spacing` is the
/// simulated acquisition spacing, whose coarsest axis becomes the
/// low-resolution axis. The high-resolution grid uses the finest in-plane
/// spacing along that axis, and the ratio must be an integer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub edge_blur_mm: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub hr: Volume3D,
    pub lr: Volume3D,
    pub factor: usize,
}

impl PhantomSpec {
    pub fn lr_axis(&self) -> usize {
        infer_lr_axis(self.spacing)
    }

    pub fn hr_spacing(&self) -> [f64; 3] {
        let lr = self.lr_axis();
        let [p, q] = in_plane_axes(lr);
        let mut s = self.spacing;
        s[lr] = s[p].min(s[q]);
        s
    }

    /// Integer ratio between acquisition and rendering spacing.
    pub fn factor(&self) -> Result<usize> {
        let lr = self.lr_axis();
        let ratio = self.spacing[lr] / self.hr_spacing()[lr];
        let f = ratio.round();
        if (ratio - f).abs() > 1e-9 * ratio || f < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "anisotropy factor {ratio} is not an integer"
            )));
        }
        Ok(f as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        if self.dims.iter().any(|&n| n < 2) {
            return invalid(format!("phantom dims {:?} must be at least 2", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return invalid(format!("phantom spacing {:?} must be positive", self.spacing));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return invalid(format!("noise_std {} must be non-negative", self.noise_std));
        }
        if !(self.edge_blur_mm >= 0.0 && self.edge_blur_mm.is_finite()) {
            return invalid(format!("edge_blur_mm {} must be non-negative", self.edge_blur_mm));
        }
        self.factor()?;
        let s = self.hr_spacing();
        for (i, p) in self.primitives.iter().enumerate() {
            let c = p.center();
            if (0..3).any(|a| !(0.0..=self.dims[a] as f64 * s[a]).contains(&c[a])) {
                return invalid(format!("primitive {i} center {c:?} lies outside the field of view"));
            }
            if p.radii().iter().any(|&r| !(r > 0.0 && r.is_finite())) {
                return invalid(format!("primitive {i} radii {:?} must be positive", p.radii()));
            }
            if !(0.0..=1.0).contains(&p.intensity()) {
                return invalid(format!("primitive {i} intensity {} outside [0, 1]", p.intensity()));
            }
        }
        Ok(())
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn occupancy(distance: f64, blur: f64) -> f64 {
    if blur > 0.0 {
        normal_cdf(-distance / blur)
    } else if distance < 0.0 {
        1.0
    } else if distance == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// Renders the phantom. Primitives are painted in list order over a zero
/// background, each blending by its blurred occupancy. Deterministic per
/// seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let factor = spec.factor()?;
    let lr = spec.lr_axis();
    let s = spec.hr_spacing();
    let [n0, n1, n2] = spec.dims;
    let mut data = vec![0.0; n0 * n1 * n2];
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let p = [
                    (i0 as f64 + 0.5) * s[0],
                    (i1 as f64 + 0.5) * s[1],
                    (i2 as f64 + 0.5) * s[2],
                ];
                let mut v = 0.0;
                for prim in &spec.primitives {
                    let occ = occupancy(prim.signed_distance(p), spec.edge_blur_mm);
                    v += occ * (prim.intensity() - v);
                }
                data[(i0 * n1 + i1) * n2 + i2] = v;
            }
        }
    }
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in &mut data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_std * z;
        }
    }
    let hr = Volume3D::with_meta(spec.dims, s, data, lr, (0.0, 1.0))?;
    let lr_vol = block_average(&hr, lr, factor, spec.spacing)?;
    Ok(Phantom {
        hr,
        lr: lr_vol,
        factor,
    })
}

/// Averages consecutive groups of `factor` slices along `axis`; a partial
/// trailing group averages what it has.
fn block_average(v: &Volume3D, axis: usize, factor: usize, spacing: [f64; 3]) -> Result<Volume3D> {
    let mut dims = v.dims();
    dims[axis] = dims[axis].div_ceil(factor);
    let mut sum = vec![0.0; dims.iter().product()];
    let mut count = vec![0usize; sum.len()];
    let vd = v.dims();
    for i0 in 0..vd[0] {
        for i1 in 0..vd[1] {
            for i2 in 0..vd[2] {
                let mut j = [i0, i1, i2];
                j[axis] /= factor;
                let k = (j[0] * dims[1] + j[1]) * dims[2] + j[2];
                sum[k] += v.get([i0, i1, i2]);
                count[k] += 1;
            }
        }
    }
    let data = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    Volume3D::with_meta(dims, spacing, data, axis, v.intensity_range())
}

/// A random body-like phantom: a large low-intensity ellipsoid holding
/// several brighter ellipsoids and boxes.
pub fn random_phantom_spec(seed: u64, dims: [usize; 3], spacing: [f64; 3]) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut spec = PhantomSpec {
        seed,
        dims,
        spacing,
        primitives: Vec::new(),
        noise_std: 0.02,
        edge_blur_mm: 0.5,
    };
    let s = spec.hr_spacing();
    let fov: Vec<f64> = (0..3).map(|a| dims[a] as f64 * s[a]).collect();
    let body_c = [fov[0] / 2.0, fov[1] / 2.0, fov[2] / 2.0];
    let body_r = [
        fov[0] * rng.gen_range(0.36..0.44),
        fov[1] * rng.gen_range(0.36..0.44),
        fov[2] * rng.gen_range(0.36..0.44),
    ];
    spec.primitives.push(Primitive::Ellipsoid {
        center: body_c,
        radii: body_r,
        intensity: rng.gen_range(0.25..0.4),
    });
    let n_inner = rng.gen_range(3..=6);
    for _ in 0..n_inner {
        let center = [
            body_c[0] + body_r[0] * rng.gen_range(-0.5..0.5),
            body_c[1] + body_r[1] * rng.gen_range(-0.5..0.5),
            body_c[2] + body_r[2] * rng.gen_range(-0.5..0.5),
        ];
        let scale = fov.iter().cloned().fold(f64::INFINITY, f64::min);
        let radii = [
            scale * rng.gen_range(0.06..0.16),
            scale * rng.gen_range(0.06..0.16),
            scale * rng.gen_range(0.06..0.16),
        ];
        let intensity = rng.gen_range(0.55..1.0);
        spec.primitives.push(if rng.gen_bool(0.6) {
            Primitive::Ellipsoid {
                center,
                radii,
                intensity,
            }
        } else {
            Primitive::Slab {
                center,
                radii,
                intensity,
            }
        });
    }
    spec
}
