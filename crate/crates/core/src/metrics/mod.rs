//! Image quality measures: a block-based no-reference score, edge sharpness
//! of smoothed line profiles, ROI signal-to-noise and paired PSNR.

mod nr;
mod profile;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::volume::{extract_slices, Plane, Volume3D};

pub use nr::{block_terms, nr_score, pool_score, BlockTerms, ACTIVE_STD, BLOCK};
pub use profile::{
    edge_sharpness, phantom_edge_profiles, savgol_filter, LineProfile, MIN_PROFILE_LEN,
    PHANTOM_PROFILE_LEN, SAVGOL_KERNEL, SAVGOL_WINDOW,
};

pub const PSNR_CAP_DB: f64 = 99.0;

/// Axis-aligned box in voxel indices, `lo` inclusive and `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Roi {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Roi { lo, hi }
    }

    fn values(&self, v: &Volume3D) -> Result<Vec<f64>> {
        let dims = v.dims();
        if (0..3).any(|a| self.lo[a] >= self.hi[a] || self.hi[a] > dims[a]) {
            return Err(Error::InvalidArgument(format!(
                "ROI {:?}..{:?} is empty or outside a volume of {dims:?}",
                self.lo, self.hi
            )));
        }
        let mut out = Vec::new();
        for i in self.lo[0]..self.hi[0] {
            for j in self.lo[1]..self.hi[1] {
                for k in self.lo[2]..self.hi[2] {
                    out.push(v.get([i, j, k]));
                }
            }
        }
        Ok(out)
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Signal and noise statistics of a pair of ROIs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrStats {
    pub signal: f64,
    pub noise: f64,
    pub snr: f64,
}

/// Mean of the signal ROI over the population std of the noise ROI.
pub fn snr_stats(v: &Volume3D, signal_roi: &Roi, noise_roi: &Roi) -> Result<SnrStats> {
    let (signal, _) = mean_std(&signal_roi.values(v)?);
    let (_, noise) = mean_std(&noise_roi.values(v)?);
    if !(noise > 0.0) {
        return Err(Error::InvalidArgument(
            "noise ROI has zero variance; SNR is undefined".into(),
        ));
    }
    Ok(SnrStats {
        signal,
        noise,
        snr: signal / noise,
    })
}

pub fn snr(v: &Volume3D, signal_roi: &Roi, noise_roi: &Roi) -> Result<f64> {
    Ok(snr_stats(v, signal_roi, noise_roi)?.snr)
}

/// `10 log10(1 / MSE)` for a reference with peak 1, capped at 99 dB.
pub fn psnr(reconstruction: &Volume3D, reference: &Volume3D) -> Result<f64> {
    if reconstruction.dims() != reference.dims() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", reconstruction.dims(), reference.dims()),
        ));
    }
    let mse = reconstruction
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Maps `range` linearly onto `[0, 1]`, clamping outliers.
pub fn to_unit_range(img: &Image2D, range: (f64, f64)) -> Image2D {
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Per-slice no-reference scores of one plane, with intensities taken to
/// `[0, 1]` through `range`.
pub fn nr_scores_volume(v: &Volume3D, plane: Plane, range: (f64, f64)) -> Result<Vec<f64>> {
    extract_slices(v, plane)
        .iter()
        .map(|s| nr_score(&to_unit_range(s, range)))
        .collect()
}

/// Mean and population std of a list.
pub fn summarize(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    mean_std(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub model: String,
    pub orientation: Plane,
    pub nr_score: f64,
    pub nr_score_std: f64,
    pub per_slice_scores: Vec<f64>,
    pub edge_sharpness: Vec<f64>,
    pub edge_sharpness_mean: f64,
    pub snr: Option<SnrStats>,
    pub psnr_db: Option<f64>,
}

pub const REPORT_CSV_HEADER: [&str; 9] = [
    "model",
    "orientation",
    "score_mean",
    "score_std",
    "es",
    "signal",
    "noise",
    "snr",
    "psnr_db",
];

/// Inputs of [`evaluate_volume`] beyond the volume itself.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions<'a> {
    pub model: String,
    /// Intensities mapped to `[0, 1]` for the no-reference score and edge
    /// profiles; defaults to the volume's recorded intensity range.
    pub range: Option<(f64, f64)>,
    pub profiles: Vec<LineProfile>,
    pub rois: Option<(Roi, Roi)>,
    pub reference: Option<&'a Volume3D>,
}

pub fn evaluate_volume(v: &Volume3D, plane: Plane, opts: &EvalOptions) -> Result<QualityReport> {
    let range = opts.range.unwrap_or_else(|| v.intensity_range());
    let per_slice = nr_scores_volume(v, plane, range)?;
    let (nr_mean, nr_std) = summarize(&per_slice);
    let span = if range.1 > range.0 { range.1 - range.0 } else { 1.0 };
    let es = opts
        .profiles
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.samples.iter_mut().for_each(|s| *s = (*s - range.0) / span);
            edge_sharpness(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    let es_mean = if es.is_empty() { 0.0 } else { summarize(&es).0 };
    let snr = opts
        .rois
        .as_ref()
        .map(|(s, n)| snr_stats(v, s, n))
        .transpose()?;
    let psnr_db = opts.reference.map(|r| psnr(v, r)).transpose()?;
    Ok(QualityReport {
        model: opts.model.clone(),
        orientation: plane,
        nr_score: nr_mean,
        nr_score_std: nr_std,
        per_slice_scores: per_slice,
        edge_sharpness: es,
        edge_sharpness_mean: es_mean,
        snr,
        psnr_db,
    })
}

impl QualityReport {
    pub fn csv_record(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.model.clone(),
            self.orientation.name().to_string(),
            self.nr_score.to_string(),
            self.nr_score_std.to_string(),
            self.edge_sharpness_mean.to_string(),
            opt(self.snr.map(|s| s.signal)),
            opt(self.snr.map(|s| s.noise)),
            opt(self.snr.map(|s| s.snr)),
            opt(self.psnr_db),
        ]
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One CSV row per report.
pub fn write_reports_csv<W: Write>(writer: W, reports: &[QualityReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush().map_err(|e| Error::io("report csv", e))
}
