//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 0..8         | magic `CLADECKP`                                    |
//! | 8..12        | `u32` length `L` of the manifest                    |
//! | 12..12+L     | UTF-8 JSON manifest (see [`Manifest`])              |
//! | 12+L..       | raw tensor values, manifest order, row-major, `dtype` |
//!
//! The manifest lists `format_version`, `dtype` (`"f32"`/`"f64"`), the ordered
//! `tensors` (`name`, `shape`) and a free-form `metadata` object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CLADECKP";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Ordered named tensors plus arbitrary JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let values: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + values * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing CLADECKP magic".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + len)
            .ok_or_else(|| bad(format!("manifest length {len} exceeds file")))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.dtype != T::DTYPE {
            return Err(bad(format!(
                "stored dtype {} but {} requested",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let mut raw = &bytes[12 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            let need = numel * T::BYTES;
            if raw.len() < need {
                return Err(bad(format!("truncated data for {}", entry.name)));
            }
            let data = raw[..need].chunks_exact(T::BYTES).map(T::read_le).collect();
            raw = &raw[need..];
            let t = Tensor::new(entry.shape, data).map_err(|e| bad(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        if !raw.is_empty() {
            return Err(bad(format!("{} trailing bytes", raw.len())));
        }
        Ok(Checkpoint {
            tensors,
            metadata: manifest.metadata,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
