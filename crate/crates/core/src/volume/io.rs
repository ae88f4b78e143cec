//! `.vol` files: little-endian f32 voxels, axis 2 fastest, described by a
//! `.vol.json` sidecar holding the header.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Volume3D;
use crate::error::{Error, Result};

pub const VOLUME_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub format_version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub lr_axis: usize,
    pub intensity_range: [f64; 2],
}

/// `<name>.vol` -> `<name>.vol.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the voxel file and its sidecar. Values are stored as f32, so the
/// round trip is exact for data that is already f32-representable.
pub fn save_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        format_version: VOLUME_FORMAT_VERSION,
        dims: v.dims,
        spacing_mm: v.spacing,
        lr_axis: v.lr_axis,
        intensity_range: [v.intensity_range.0, v.intensity_range.1],
    };
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in &v.data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let side = sidecar_path(path);
    let bad = |p: &Path, detail: String| Error::Format {
        kind: "volume",
        path: p.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| bad(&side, format!("header: {e}")))?;
    if header.format_version != VOLUME_FORMAT_VERSION {
        return Err(bad(
            &side,
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(bad(
            &side,
            format!("non-positive spacing {:?}", header.spacing_mm),
        ));
    }
    if header.dims.contains(&0) || header.lr_axis > 2 {
        return Err(bad(
            &side,
            format!("dims {:?} / lr_axis {}", header.dims, header.lr_axis),
        ));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(bad(
            path,
            format!(
                "size mismatch: dims {:?} need {} bytes, file has {}",
                header.dims,
                n * 4,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume3D::with_meta(
        header.dims,
        header.spacing_mm,
        data,
        header.lr_axis,
        (header.intensity_range[0], header.intensity_range[1]),
    )
}
