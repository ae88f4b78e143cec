//! Browser bindings for three small views of the pipeline: phantom slices
//! before and after resampling, patch-grid coverage and stitching, and
//! edge profiles with Sobel responses.

use wasm_bindgen::prelude::*;

use clade::image::Image2D;
use clade::losses::sobel_gradients;
use clade::metrics::{edge_sharpness, psnr, savgol_filter, LineProfile};
use clade::patchwork::{stitch_patches, PatchGrid};
use clade::tensor::Tape;
use clade::trainer::detect_block_artifacts;
use clade::volume::{
    extract_slices, generate_phantom, random_phantom_spec, resample_to_isotropic, Plane, Volume3D,
};

fn js(e: clade::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Grayscale RGBA bytes of `img`, `lo..hi` mapped to black..white.
pub fn rgba(img: &Image2D, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(img.data().len() * 4);
    for &v in img.data() {
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Nearest-neighbour upsampling along the coarse axis: what the scanner
/// slices look like on the isotropic grid.
fn nearest_upsample(lr: &Volume3D, like: &Volume3D) -> clade::Result<Volume3D> {
    let axis = lr.lr_axis();
    let n_lr = lr.dims()[axis];
    let n_iso = like.dims()[axis];
    let [d0, d1, d2] = like.dims();
    let mut data = Vec::with_capacity(like.len());
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let mut idx = [i0, i1, i2];
                idx[axis] = (idx[axis] * n_lr / n_iso).min(n_lr - 1);
                data.push(lr.get(idx));
            }
        }
    }
    like.with_data(data)
}

#[wasm_bindgen]
pub struct PhantomView {
    hr: Volume3D,
    nearest: Volume3D,
    interpolated: Volume3D,
    hr_slices: Vec<Image2D>,
    nearest_slices: Vec<Image2D>,
    interp_slices: Vec<Image2D>,
}

impl PhantomView {
    pub fn build(seed: u64, size: usize, factor: usize) -> clade::Result<Self> {
        let spec = random_phantom_spec(seed, [size, size, size], [1.0, 1.0, factor as f64]);
        let ph = generate_phantom(&spec)?;
        let interpolated = resample_to_isotropic(&ph.lr)?;
        let nearest = nearest_upsample(&ph.lr, &interpolated)?;
        Ok(PhantomView {
            hr_slices: extract_slices(&ph.hr, Plane::LrPrimary),
            nearest_slices: extract_slices(&nearest, Plane::LrPrimary),
            interp_slices: extract_slices(&interpolated, Plane::LrPrimary),
            hr: ph.hr,
            nearest,
            interpolated,
        })
    }

    fn pick(&self, which: &str) -> Option<&[Image2D]> {
        match which {
            "hr" => Some(&self.hr_slices),
            "nearest" => Some(&self.nearest_slices),
            "interpolated" => Some(&self.interp_slices),
            _ => None,
        }
    }

    pub fn slice_image(&self, which: &str, index: usize) -> Option<&Image2D> {
        self.pick(which).and_then(|s| s.get(index))
    }

    /// Sobel gradient magnitude of one slice.
    pub fn sobel_image(&self, which: &str, index: usize) -> Option<Image2D> {
        let img = self.slice_image(which, index)?;
        Some(sobel_magnitude(img).expect("slices are at least 3x3"))
    }
}

#[wasm_bindgen]
impl PhantomView {
    /// Random phantom of `size`^3 voxels acquired with `factor`-times
    /// coarser slices along the last axis.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, factor: usize) -> Result<PhantomView, JsError> {
        Self::build(seed as u64, size, factor).map_err(js)
    }

    #[wasm_bindgen(js_name = sliceCount)]
    pub fn slice_count(&self) -> usize {
        self.hr_slices.len()
    }

    pub fn rows(&self) -> usize {
        self.hr_slices[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.hr_slices[0].cols()
    }

    /// RGBA pixels of slice `index` of `"hr"`, `"nearest"` or
    /// `"interpolated"`; empty for an unknown name or index.
    pub fn slice(&self, which: &str, index: usize) -> Vec<u8> {
        self.slice_image(which, index)
            .map(|img| rgba(img, 0.0, 1.0))
            .unwrap_or_default()
    }

    /// RGBA Sobel magnitude of the same slice.
    pub fn sobel(&self, which: &str, index: usize) -> Vec<u8> {
        self.sobel_image(which, index)
            .map(|img| rgba(&img, 0.0, 2.0))
            .unwrap_or_default()
    }

    #[wasm_bindgen(js_name = psnrNearest)]
    pub fn psnr_nearest(&self) -> f64 {
        psnr(&self.nearest, &self.hr).unwrap_or(f64::NAN)
    }

    #[wasm_bindgen(js_name = psnrInterpolated)]
    pub fn psnr_interpolated(&self) -> f64 {
        psnr(&self.interpolated, &self.hr).unwrap_or(f64::NAN)
    }
}

pub fn sobel_magnitude(img: &Image2D) -> clade::Result<Image2D> {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Image2D::stack::<f64>(std::slice::from_ref(img))?);
    let (gx, gy) = sobel_gradients(x)?;
    let gx = Image2D::unstack(&gx.value())?.remove(0);
    let gy = Image2D::unstack(&gy.value())?.remove(0);
    Image2D::new(
        img.rows(),
        img.cols(),
        gx.data().iter().zip(gy.data()).map(|(a, b)| a.hypot(*b)).collect(),
    )
}

#[wasm_bindgen]
pub struct GridView {
    patches: usize,
    max_cover: f64,
    min_cover: f64,
    identity_error: f64,
    seam_score: f64,
    coverage: Vec<u8>,
    seams: Vec<u8>,
}

/// Smooth test pattern used for the stitching view.
fn pattern(rows: usize, cols: usize) -> Image2D {
    Image2D::from_fn(rows, cols, |r, c| {
        let (y, x) = (r as f64 / rows as f64, c as f64 / cols as f64);
        0.5 + 0.3 * (6.0 * x + 2.0 * y).sin() * (4.0 * y).cos()
    })
}

impl GridView {
    pub fn build(rows: usize, cols: usize, stride: usize, offset: f64) -> clade::Result<Self> {
        let grid = PatchGrid::new(rows, cols, stride)?;
        let img = pattern(rows, cols);
        let patches = grid.extract(&img)?;
        let identity_error = stitch_patches(&grid, &patches)?.max_abs_diff(&img);
        // Each patch gets its own brightness offset, like a generator with
        // per-patch normalization statistics.
        let shifted: Vec<Image2D> = patches
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = offset * (((i * 7919) % 13) as f64 / 12.0 - 0.5);
                p.map(|v| v + s)
            })
            .collect();
        let stitched = stitch_patches(&grid, &shifted)?;
        let seam_score = detect_block_artifacts(&stitched, &grid)?;
        let cover = grid.coverage();
        let max_cover = cover.data().iter().cloned().fold(f64::MIN, f64::max);
        let min_cover = cover.data().iter().cloned().fold(f64::MAX, f64::min);
        Ok(GridView {
            patches: grid.len(),
            max_cover,
            min_cover,
            identity_error,
            seam_score,
            coverage: rgba(&cover, 0.0, max_cover),
            seams: rgba(&stitched, 0.0, 1.0),
        })
    }
}

#[wasm_bindgen]
impl GridView {
    /// Patch grid over a `rows` x `cols` slice at `stride`; `offset` is the
    /// spread of per-patch brightness shifts in the seam view.
    #[wasm_bindgen(constructor)]
    pub fn new(rows: usize, cols: usize, stride: usize, offset: f64) -> Result<GridView, JsError> {
        Self::build(rows, cols, stride, offset).map_err(js)
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    #[wasm_bindgen(js_name = maxCover)]
    pub fn max_cover(&self) -> f64 {
        self.max_cover
    }

    #[wasm_bindgen(js_name = minCover)]
    pub fn min_cover(&self) -> f64 {
        self.min_cover
    }

    /// Max abs error of extract then stitch with unchanged patches.
    #[wasm_bindgen(js_name = identityError)]
    pub fn identity_error(&self) -> f64 {
        self.identity_error
    }

    #[wasm_bindgen(js_name = seamScore)]
    pub fn seam_score(&self) -> f64 {
        self.seam_score
    }

    pub fn coverage(&self) -> Vec<u8> {
        self.coverage.clone()
    }

    pub fn seams(&self) -> Vec<u8> {
        self.seams.clone()
    }
}

#[wasm_bindgen]
pub struct EdgeView {
    raw: Vec<f64>,
    smoothed: Vec<f64>,
    sharpness: f64,
}

impl EdgeView {
    /// 15 samples across a blurred unit step of width `width_mm`, with
    /// deterministic pseudo-noise of amplitude `noise`.
    pub fn build(width_mm: f64, noise: f64, spacing_mm: f64, seed: u32) -> clade::Result<Self> {
        let n = 15;
        let mut state = seed as u64 | 1;
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let u = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                let x = (i as f64 - (n - 1) as f64 / 2.0) * spacing_mm;
                0.5 + 0.5 * (x / width_mm.max(1e-6)).tanh() + noise * u
            })
            .collect();
        let profile = LineProfile::new(raw.clone(), spacing_mm)?;
        Ok(EdgeView {
            smoothed: savgol_filter(&profile)?.samples,
            sharpness: edge_sharpness(&profile)?,
            raw,
        })
    }
}

#[wasm_bindgen]
impl EdgeView {
    #[wasm_bindgen(constructor)]
    pub fn new(width_mm: f64, noise: f64, spacing_mm: f64, seed: u32) -> Result<EdgeView, JsError> {
        Self::build(width_mm, noise, spacing_mm, seed).map_err(js)
    }

    pub fn raw(&self) -> Vec<f64> {
        self.raw.clone()
    }

    pub fn smoothed(&self) -> Vec<f64> {
        self.smoothed.clone()
    }

    /// Edge sharpness in 1/mm.
    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }
}
