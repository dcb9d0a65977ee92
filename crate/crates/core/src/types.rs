//! Numeric containers shared by every stage of the engine.
//!
//! Everything here is immutable once constructed; constructors validate shape
//! and finiteness so downstream kernels can index without checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_finite<'a, T: Scalar>(what: &str, values: impl IntoIterator<Item = &'a T>) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(at) => Err(Error::InvalidValue(format!("{what}: non-finite value at {at}"))),
        None => Ok(()),
    }
}

/// A preprocessed image in channel-major `(channels, height, width)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Vec<f32>,
    channels: usize,
    height: usize,
    width: usize,
    source_path: String,
}

impl ImageTensor {
    pub fn new(
        pixels: Vec<f32>,
        channels: usize,
        height: usize,
        width: usize,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue("image must be at least 1x1".into()));
        }
        let expected = channels * height * width;
        if pixels.len() != expected {
            return Err(Error::dim("image pixels", expected, pixels.len()));
        }
        check_finite("image", &pixels)?;
        Ok(ImageTensor {
            pixels,
            channels,
            height,
            width,
            source_path: source_path.into(),
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            vec![value; channels * height * width],
            channels,
            height,
            width,
            String::new(),
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn with_source_path(mut self, path: impl Into<String>) -> Self {
        self.source_path = path.into();
        self
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.pixels[(channel * self.height + row) * self.width + col]
    }

    /// Same geometry, new pixel values. Values must be finite.
    pub(crate) fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        debug_assert!(pixels.iter().all(|v| v.is_finite()));
        ImageTensor {
            pixels,
            channels: self.channels,
            height: self.height,
            width: self.width,
            source_path: self.source_path.clone(),
        }
    }

    /// Copy with every pixel whose flat `row * width + col` index is flagged in
    /// `replace` set to `fill` across all channels.
    pub fn masked(&self, replace: &[bool], fill: f32) -> Result<Self> {
        if replace.len() != self.pixel_count() {
            return Err(Error::dim("pixel mask", self.pixel_count(), replace.len()));
        }
        let plane = self.pixel_count();
        let mut pixels = self.pixels.clone();
        for c in 0..self.channels {
            for (p, _) in replace.iter().enumerate().filter(|(_, r)| **r) {
                pixels[c * plane + p] = fill;
            }
        }
        Ok(self.with_pixels(pixels))
    }
}

/// Output of the convolutional stack, `(h, w, d)` with depth fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap3D<T> {
    values: Vec<T>,
    height: usize,
    width: usize,
    depth: usize,
}

impl<T: Scalar> FeatureMap3D<T> {
    pub fn new(values: Vec<T>, height: usize, width: usize, depth: usize) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidValue("feature map dimensions must be >= 1".into()));
        }
        if values.len() != height * width * depth {
            return Err(Error::dim("feature map values", height * width * depth, values.len()));
        }
        check_finite("feature map", &values)?;
        Ok(FeatureMap3D {
            values,
            height,
            width,
            depth,
        })
    }

    /// Builds from channel-major `(d, h, w)` data as emitted by NCHW runtimes.
    pub fn from_channel_major(data: &[T], depth: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::dim("feature map values", depth * height * width, data.len()));
        }
        let mut values = vec![T::zero(); data.len()];
        for k in 0..depth {
            for i in 0..height {
                for j in 0..width {
                    values[(i * width + j) * depth + k] = data[(k * height + i) * width + j];
                }
            }
        }
        Self::new(values, height, width, depth)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `(h, w)`.
    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> T {
        self.values[(row * self.width + col) * self.depth + channel]
    }

    /// Depth vector `C[i, j, :]`.
    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.depth;
        &self.values[start..start + self.depth]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap3D<U> {
        FeatureMap3D {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            height: self.height,
            width: self.width,
            depth: self.depth,
        }
    }
}

/// Penultimate-layer representation feeding the final linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector<T>(Vec<T>);

impl<T: Scalar> LatentVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidValue("latent vector must be non-empty".into()));
        }
        check_finite("latent", &values)?;
        Ok(LatentVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// Spatial saliency over an `(h, w)` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap<T> {
    values: Vec<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> ActivationMap<T> {
    pub fn new(values: Vec<T>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue("activation map must be at least 1x1".into()));
        }
        if values.len() != height * width {
            return Err(Error::dim("activation map values", height * width, values.len()));
        }
        check_finite("activation map", &values)?;
        Ok(ActivationMap {
            values,
            height,
            width,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    /// Row-major first cell holding the maximum.
    pub fn argmax(&self) -> SpatialCell {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = k;
            }
        }
        SpatialCell::new(best / self.width, best % self.width)
    }

    pub fn cast<U: Scalar>(&self) -> ActivationMap<U> {
        ActivationMap {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            height: self.height,
            width: self.width,
        }
    }
}

/// Dense row-major matrix. Final-layer weights are stored `d_latent x n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(data: Vec<T>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix values", rows * cols, data.len()));
        }
        check_finite("matrix", &data)?;
        Ok(Matrix { data, rows, cols })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for k in 0..n {
            data[k * n + k] = T::one();
        }
        Matrix {
            data,
            rows: n,
            cols: n,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Matrix {
            data,
            rows: self.cols,
            cols: self.rows,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Grid position `(i, j)` in a feature or activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpatialCell {
    pub row: usize,
    pub col: usize,
}

impl SpatialCell {
    pub const fn new(row: usize, col: usize) -> Self {
        SpatialCell { row, col }
    }
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Result<Self> {
        if top >= bottom || left >= right {
            return Err(Error::Bounds(format!(
                "degenerate box ({top},{left},{bottom},{right})"
            )));
        }
        Ok(PixelBox {
            top,
            left,
            bottom,
            right,
        })
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.bottom <= height && self.right <= width
    }
}
