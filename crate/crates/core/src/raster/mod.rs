//! Raster types shared by every stage: anomaly maps, binary masks,
//! grayscale images and labelled regions.

mod components;
mod io;
mod morphology;
mod resize;

pub use components::{connected_components, Connectivity, RegionSet};
pub use io::{
    load_anomaly_map, load_anomaly_map_counted, load_gray_image, load_mask, save_anomaly_map_png16,
    save_anomaly_map_raw, save_gray_image, save_mask,
};
pub use morphology::{erode, reconstruct};
pub use resize::{resize_bilinear, resize_nearest};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("size mismatch: header declares {expected} values, payload holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("unsupported image format in {0}")]
    UnsupportedFormat(String),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::InvalidDimensions { width, height });
    }
    if width * height != len {
        return Err(RasterError::SizeMismatch { expected: width * height, actual: len });
    }
    Ok(())
}

/// Per-pixel anomaly probabilities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl AnomalyMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        check_dims(width, height, data.len())?;
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(RasterError::NonFinite(index));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(RasterError::OutOfRange { index, value });
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Maximum value: the map's anomaly score.
    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// `1[map > threshold]`, strict.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| u8::from(v as f64 > threshold)).collect(),
        }
    }
}

/// Row-major `{0, 1}` raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        check_dims(width, height, data.len())?;
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(RasterError::OutOfRange { index, value: data[index] as f32 });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, data: vec![1; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Pixel-wise subset test.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a & b);
            union += usize::from(a | b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn crop(&self, b: &BoundingBox) -> BinaryMask {
        BinaryMask::from_fn(b.width(), b.height(), |x, y| self.get(b.min_x + x, b.min_y + y))
    }
}

/// Single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        check_dims(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, data: vec![v; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn crop(&self, b: &BoundingBox) -> GrayImage {
        GrayImage::from_fn(b.width(), b.height(), |x, y| self.get(b.min_x + x, b.min_y + y))
    }
}

/// Axis-aligned box with inclusive corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

impl BoundingBox {
    pub fn point(x: usize, y: usize) -> Self {
        Self { min_x: x, min_y: y, max_x: x, max_y: y }
    }

    pub fn width(&self) -> usize {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> usize {
        self.max_y - self.min_y + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn include(&mut self, x: usize, y: usize) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.min_x..=self.max_x).contains(&x) && (self.min_y..=self.max_y).contains(&y)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix0 = self.min_x.max(other.min_x);
        let iy0 = self.min_y.max(other.min_y);
        let ix1 = self.max_x.min(other.max_x);
        let iy1 = self.max_y.min(other.max_y);
        let inter = if ix0 > ix1 || iy0 > iy1 { 0 } else { (ix1 - ix0 + 1) * (iy1 - iy0 + 1) };
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}
