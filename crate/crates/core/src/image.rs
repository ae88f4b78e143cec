//! Row-major 2-D float images: slices, patches and stitched outputs.

use crate::error::{Error, Result};
use crate::tensor::{cst, to_f64, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::shape(
                "image",
                format!("{rows}x{cols} image cannot hold {} values", data.len()),
            ));
        }
        Ok(Image2D { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Image2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Image2D { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Image2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `h x w` window whose top-left corner is `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        if r0 + h > self.rows || c0 + w > self.cols || h == 0 || w == 0 {
            return Err(Error::shape(
                "crop",
                format!(
                    "{h}x{w} window at ({r0},{c0}) exceeds {}x{} image",
                    self.rows, self.cols
                ),
            ));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + w]);
        }
        Ok(Image2D { rows: h, cols: w, data })
    }

    pub fn transpose(&self) -> Self {
        Image2D::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image2D) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks images of equal size into a `[k, 1, h, w]` tensor.
    pub fn stack<T: Scalar>(images: &[Image2D]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
        let (h, w) = (first.rows, first.cols);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if (im.rows, im.cols) != (h, w) {
                return Err(Error::shape(
                    "stack",
                    format!("mixed sizes {h}x{w} and {}x{}", im.rows, im.cols),
                ));
            }
            data.extend(im.data.iter().map(|&v| cst::<T>(v)));
        }
        Tensor::new(vec![images.len(), 1, h, w], data)
    }

    /// Splits a `[k, 1, h, w]` tensor back into images.
    pub fn unstack<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image2D>> {
        let [k, c, h, w] = t.dims4("unstack")?;
        if c != 1 {
            return Err(Error::shape("unstack", format!("expected 1 channel, got {c}")));
        }
        Ok((0..k)
            .map(|i| Image2D {
                rows: h,
                cols: w,
                data: t.data()[i * h * w..(i + 1) * h * w]
                    .iter()
                    .map(|&v| to_f64(v))
                    .collect(),
            })
            .collect())
    }
}
