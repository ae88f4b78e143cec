//! Whole-volume super-resolution with a patch generator, and the
//! stride/time trade-off sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::metrics::{nr_scores_volume, summarize};
use crate::net::{Architecture, Generator, GeneratorSpec, NetworkParams};
use crate::patchwork::{stitch_patches, PatchGrid, PATCH};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Scalar};
use crate::volume::{
    assemble_slices, denormalize_intensity, extract_slices, normalize_intensity,
    resample_to_isotropic, Plane, Volume3D,
};

pub const DEFAULT_STRIDE: usize = 12;
/// Patches per generator call.
pub const INFER_BATCH: usize = 32;
pub const DEFAULT_PERCENTILES: (f64, f64) = (0.5, 99.5);

/// Anything that maps 32x32 patches in `[-1, 1]` to same-size patches.
pub trait PatchMapper: Sync {
    fn map_patches(&self, patches: &[Image2D]) -> Result<Vec<Image2D>>;
}

pub struct IdentityMapper;

impl PatchMapper for IdentityMapper {
    fn map_patches(&self, patches: &[Image2D]) -> Result<Vec<Image2D>> {
        Ok(patches.to_vec())
    }
}

/// Sends every patch to the same constant value.
pub struct ConstantMapper(pub f64);

impl PatchMapper for ConstantMapper {
    fn map_patches(&self, patches: &[Image2D]) -> Result<Vec<Image2D>> {
        Ok(patches
            .iter()
            .map(|p| Image2D::from_fn(p.rows(), p.cols(), |_, _| self.0))
            .collect())
    }
}

impl<T: Scalar> PatchMapper for Generator<T> {
    fn map_patches(&self, patches: &[Image2D]) -> Result<Vec<Image2D>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFER_BATCH) {
            let y = self.forward(&Image2D::stack::<T>(chunk)?)?;
            out.extend(Image2D::unstack(&y)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub stride: usize,
    /// Percentile window mapped onto `[-1, 1]` before the generator.
    pub percentiles: (f64, f64),
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            stride: DEFAULT_STRIDE,
            percentiles: DEFAULT_PERCENTILES,
        }
    }
}

/// Patch-grid forward of one slice.
pub fn map_slice(slice: &Image2D, mapper: &dyn PatchMapper, stride: usize) -> Result<Image2D> {
    let grid = PatchGrid::new(slice.rows(), slice.cols(), stride)?;
    let patches = grid.extract(slice)?;
    let mapped = mapper.map_patches(&patches)?;
    if mapped.len() != patches.len() || mapped.iter().any(|p| (p.rows(), p.cols()) != (PATCH, PATCH)) {
        return Err(Error::shape(
            "patch mapper",
            format!("returned {} patches for {} inputs", mapped.len(), patches.len()),
        ));
    }
    stitch_patches(&grid, &mapped)
}

/// Resamples to isotropic spacing, normalizes, runs the mapper over the
/// patch grid of every low-resolution primary slice, stitches, reassembles
/// and maps intensities back.
pub fn super_resolve_volume(
    v: &Volume3D,
    mapper: &dyn PatchMapper,
    opts: &InferenceOptions,
) -> Result<Volume3D> {
    let iso = resample_to_isotropic(v)?;
    let norm = normalize_intensity(&iso, opts.percentiles.0, opts.percentiles.1)?.volume;
    let slices = extract_slices(&norm, Plane::LrPrimary);
    let out: Vec<Image2D> = slices
        .par_iter()
        .map(|s| map_slice(s, mapper, opts.stride))
        .collect::<Result<_>>()?;
    Ok(denormalize_intensity(&assemble_slices(&norm, Plane::LrPrimary, &out)?))
}

/// Patches per low-resolution primary slice of the resampled volume.
pub fn patches_per_slice(v: &Volume3D, stride: usize) -> Result<usize> {
    let iso_dims = {
        let mut d = v.dims();
        let lr = v.lr_axis();
        let [p, q] = v.in_plane_axes();
        let target = v.spacing()[p].min(v.spacing()[q]);
        d[lr] = ((d[lr] as f64 * v.spacing()[lr] / target).round() as usize).max(1);
        d
    };
    let normal = Plane::LrPrimary.normal_axis(v.lr_axis());
    let rest: Vec<usize> = (0..3).filter(|&a| a != normal).map(|a| iso_dims[a]).collect();
    Ok(PatchGrid::new(rest[0], rest[1], stride)?.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrideRow {
    pub stride: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub seconds_mean: f64,
    pub seconds_std: f64,
    pub patches_per_slice: usize,
}

pub const STRIDE_CSV_HEADER: [&str; 6] = [
    "stride",
    "score_mean",
    "score_std",
    "seconds_mean",
    "seconds_std",
    "patches_per_slice",
];

/// Runs inference at every stride `repeats` times, timing each run and
/// scoring the low-resolution primary slices of the output.
pub fn stride_sweep(
    v: &Volume3D,
    mapper: &dyn PatchMapper,
    strides: &[usize],
    repeats: usize,
    percentiles: (f64, f64),
) -> Result<Vec<StrideRow>> {
    if strides.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument(
            "stride sweep needs at least one stride and one repeat".into(),
        ));
    }
    let mut rows = Vec::with_capacity(strides.len());
    for &stride in strides {
        let opts = InferenceOptions {
            stride,
            percentiles,
        };
        let mut seconds = Vec::with_capacity(repeats);
        let mut out = None;
        for _ in 0..repeats {
            let t0 = Instant::now();
            out = Some(super_resolve_volume(v, mapper, &opts)?);
            seconds.push(t0.elapsed().as_secs_f64());
        }
        let out = out.expect("repeats >= 1");
        let scores = nr_scores_volume(&out, Plane::LrPrimary, out.intensity_range())?;
        let (score_mean, score_std) = summarize(&scores);
        let (seconds_mean, seconds_std) = summarize(&seconds);
        rows.push(StrideRow {
            stride,
            score_mean,
            score_std,
            seconds_mean,
            seconds_std,
            patches_per_slice: patches_per_slice(v, stride)?,
        });
    }
    Ok(rows)
}

pub fn write_stride_csv<W: Write>(writer: W, rows: &[StrideRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(STRIDE_CSV_HEADER)?;
    for r in rows {
        w.serialize((
            r.stride,
            r.score_mean,
            r.score_std,
            r.seconds_mean,
            r.seconds_std,
            r.patches_per_slice,
        ))?;
    }
    w.flush().map_err(|e| Error::io("stride csv", e))
}

/// Generator parameters under `prefix` (e.g. `"g_x/"`) with the
/// architecture in the metadata.
pub fn generator_checkpoint<T: Scalar>(g: &Generator<T>, prefix: &str) -> Result<Checkpoint<T>> {
    Ok(Checkpoint {
        tensors: g
            .params
            .names
            .iter()
            .zip(&g.params.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect(),
        metadata: serde_json::json!({
            "architecture": Architecture::Generator(g.spec.clone()),
        }),
    })
}

pub fn save_generator<T: Scalar>(g: &Generator<T>, path: &Path) -> Result<()> {
    save_checkpoint(&generator_checkpoint(g, "")?, path)
}

/// Rebuilds a generator from a checkpoint. Generator-only files use bare
/// parameter names; training checkpoints hold the super-resolving generator
/// under `g_x/` and its spec under `metadata.architectures.g_x`.
pub fn generator_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<Generator<T>> {
    let bad = |detail: String| Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        detail,
    };
    let (arch, prefix) = match (
        ckpt.metadata.get("architecture"),
        ckpt.metadata.pointer("/architectures/g_x"),
    ) {
        (Some(a), _) => (a.clone(), ""),
        (None, Some(a)) => (a.clone(), "g_x/"),
        (None, None) => return Err(bad("no generator architecture in metadata".into())),
    };
    let spec: GeneratorSpec = match serde_json::from_value(arch).map_err(|e| bad(e.to_string()))? {
        Architecture::Generator(s) => s,
        Architecture::Discriminator(_) => {
            return Err(bad("architecture describes a discriminator".into()))
        }
    };
    let template = Generator::<T>::new(spec.clone(), 0)?;
    let mut tensors = Vec::with_capacity(template.params.len());
    for (name, t) in template.params.names.iter().zip(&template.params.tensors) {
        let stored = ckpt
            .get(&format!("{prefix}{name}"))
            .ok_or_else(|| bad(format!("missing tensor {prefix}{name}")))?;
        if stored.shape() != t.shape() {
            return Err(bad(format!(
                "{prefix}{name} has shape {:?}, architecture expects {:?}",
                stored.shape(),
                t.shape()
            )));
        }
        tensors.push(stored.clone());
    }
    Ok(Generator {
        spec,
        params: NetworkParams {
            names: template.params.names,
            tensors,
        },
    })
}

pub fn load_generator<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    generator_from_checkpoint(&load_checkpoint(path)?, path)
}
