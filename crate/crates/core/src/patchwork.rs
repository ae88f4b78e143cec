//! 32x32 patch handling: random training crops, sliding-window grids and
//! count-normalized stitching.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::volume::{load_volume, save_volume, Volume3D};

pub const PATCH: usize = 32;

/// Sliding-window layout over an `rows x cols` slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    stride: usize,
    origins: Vec<(usize, usize)>,
}

/// Multiples of `stride` that fit, plus `len - PATCH` if it is not one.
fn axis_origins(len: usize, stride: usize) -> Vec<usize> {
    let last = len - PATCH;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, stride: usize) -> Result<Self> {
        if rows < PATCH || cols < PATCH {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} slice is smaller than a {PATCH}x{PATCH} patch"
            )));
        }
        if !(1..=PATCH).contains(&stride) {
            return Err(Error::InvalidArgument(format!(
                "stride {stride} outside 1..={PATCH}"
            )));
        }
        let rs = axis_origins(rows, stride);
        let cs = axis_origins(cols, stride);
        let origins = rs
            .iter()
            .flat_map(|&r| cs.iter().map(move |&c| (r, c)))
            .collect();
        Ok(PatchGrid {
            rows,
            cols,
            stride,
            origins,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Top-left corners in row-major order.
    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn extract(&self, slice: &Image2D) -> Result<Vec<Image2D>> {
        if (slice.rows(), slice.cols()) != (self.rows, self.cols) {
            return Err(Error::shape(
                "extract",
                format!(
                    "grid is {}x{}, slice is {}x{}",
                    self.rows,
                    self.cols,
                    slice.rows(),
                    slice.cols()
                ),
            ));
        }
        self.origins
            .iter()
            .map(|&(r, c)| slice.crop(r, c, PATCH, PATCH))
            .collect()
    }

    /// How many patches cover each pixel.
    pub fn coverage(&self) -> Image2D {
        let mut count = Image2D::zeros(self.rows, self.cols);
        for &(r0, c0) in &self.origins {
            for r in r0..r0 + PATCH {
                for v in &mut count.data_mut()[r * self.cols + c0..r * self.cols + c0 + PATCH] {
                    *v += 1.0;
                }
            }
        }
        count
    }
}

/// Adds every patch at its origin and divides by the coverage count.
pub fn stitch_patches(grid: &PatchGrid, patches: &[Image2D]) -> Result<Image2D> {
    if patches.len() != grid.len() {
        return Err(Error::shape(
            "stitch",
            format!("{} patches for {} grid origins", patches.len(), grid.len()),
        ));
    }
    let cols = grid.cols;
    let mut acc = Image2D::zeros(grid.rows, cols);
    for (p, &(r0, c0)) in patches.iter().zip(&grid.origins) {
        if (p.rows(), p.cols()) != (PATCH, PATCH) {
            return Err(Error::shape(
                "stitch",
                format!("patch is {}x{}", p.rows(), p.cols()),
            ));
        }
        for r in 0..PATCH {
            let dst = &mut acc.data_mut()[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + PATCH];
            for (d, s) in dst.iter_mut().zip(&p.data()[r * PATCH..(r + 1) * PATCH]) {
                *d += s;
            }
        }
    }
    let count = grid.coverage();
    for (v, n) in acc.data_mut().iter_mut().zip(count.data()) {
        *v /= n;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Patches from planes containing the low-resolution axis.
    XLowres,
    /// Patches from the acquired high-resolution plane.
    YHighres,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub volume: usize,
    pub slice: usize,
    pub origin: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub domain: Domain,
    pub patches: Vec<Image2D>,
    pub provenance: Vec<PatchSource>,
}

#[derive(Serialize, Deserialize)]
struct PatchSetMeta {
    domain: Domain,
    provenance: Vec<PatchSource>,
}

impl PatchSet {
    pub fn empty(domain: Domain) -> Self {
        PatchSet {
            domain,
            patches: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn append(&mut self, other: PatchSet) -> Result<()> {
        if other.domain != self.domain {
            return Err(Error::InvalidArgument(format!(
                "cannot mix {:?} patches into a {:?} set",
                other.domain, self.domain
            )));
        }
        self.patches.extend(other.patches);
        self.provenance.extend(other.provenance);
        Ok(())
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Stores the patches as a `[k, 32, 32]` volume at `path` with the
    /// domain and provenance in `<path>.meta.json` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let data = self
            .patches
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        let v = Volume3D::with_meta(
            [self.len(), PATCH, PATCH],
            [1.0; 3],
            data,
            0,
            (-1.0, 1.0),
        )?;
        save_volume(&v, path)?;
        let meta = PatchSetMeta {
            domain: self.domain,
            provenance: self.provenance.clone(),
        };
        let mp = Self::meta_path(path);
        std::fs::write(&mp, serde_json::to_string(&meta)?).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v = load_volume(path)?;
        let [k, h, w] = v.dims();
        if (h, w) != (PATCH, PATCH) {
            return Err(Error::Format {
                kind: "patch set",
                path: path.to_path_buf(),
                detail: format!("expected [k, {PATCH}, {PATCH}], got {:?}", v.dims()),
            });
        }
        let mp = Self::meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: PatchSetMeta = serde_json::from_str(&text)?;
        if meta.provenance.len() != k {
            return Err(Error::Format {
                kind: "patch set",
                path: mp,
                detail: format!("{} provenance entries for {k} patches", meta.provenance.len()),
            });
        }
        let patches = v
            .data()
            .chunks_exact(PATCH * PATCH)
            .map(|c| Image2D::new(PATCH, PATCH, c.to_vec()))
            .collect::<Result<_>>()?;
        Ok(PatchSet {
            domain: meta.domain,
            patches,
            provenance: meta.provenance,
        })
    }
}

/// Origins for [`sample_training_patches`] without copying any pixels:
/// `patches_per_slice` uniform draws per eligible `(rows, cols)` slice, in
/// slice order. Slices smaller than 32x32 are skipped.
pub fn sample_origins(
    slice_dims: &[(usize, usize)],
    volume: usize,
    patches_per_slice: usize,
    seed: u64,
) -> Result<Vec<PatchSource>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut skipped = 0;
    for (s, &(rows, cols)) in slice_dims.iter().enumerate() {
        if rows < PATCH || cols < PATCH {
            skipped += 1;
            continue;
        }
        for _ in 0..patches_per_slice {
            let r = rng.gen_range(0..=rows - PATCH);
            let c = rng.gen_range(0..=cols - PATCH);
            out.push(PatchSource {
                volume,
                slice: s,
                origin: (r, c),
            });
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} slices smaller than {PATCH}x{PATCH}");
    }
    if skipped == slice_dims.len() {
        return Err(Error::InvalidArgument(format!(
            "no slice is at least {PATCH}x{PATCH}"
        )));
    }
    Ok(out)
}

/// Draws `patches_per_slice` uniformly random crops from every slice that
/// is at least 32x32, in slice order. Smaller slices are skipped.
pub fn sample_training_patches(
    slices: &[Image2D],
    volume: usize,
    patches_per_slice: usize,
    seed: u64,
    domain: Domain,
) -> Result<PatchSet> {
    let dims: Vec<(usize, usize)> = slices.iter().map(|s| (s.rows(), s.cols())).collect();
    let provenance = sample_origins(&dims, volume, patches_per_slice, seed)?;
    let patches = provenance
        .iter()
        .map(|p| slices[p.slice].crop(p.origin.0, p.origin.1, PATCH, PATCH))
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        domain,
        patches,
        provenance,
    })
}
