//! Per-pixel softmax volumes and class-id grids.

use thiserror::Error;

/// Label value marking pixels without ground truth.
pub const IGNORE_LABEL: u8 = 255;

/// Tolerance on the per-pixel probability sum accepted at construction.
pub const SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("volume has {actual} values, expected {height}x{width}x{classes}")]
    SizeMismatch {
        height: usize,
        width: usize,
        classes: usize,
        actual: usize,
    },
    #[error("volume needs at least one class")]
    NoClasses,
    #[error("pixel ({row}, {col}) holds a non-finite or negative probability")]
    InvalidValue { row: usize, col: usize },
    #[error("pixel ({row}, {col}) sums to {sum}, outside 1 +/- {SUM_TOLERANCE}")]
    NotNormalized { row: usize, col: usize, sum: f64 },
    #[error("label map has {actual} values, expected {height}x{width}")]
    LabelSizeMismatch {
        height: usize,
        width: usize,
        actual: usize,
    },
}

/// Softmax output of a segmentation network, stored height x width x classes
/// with the class axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f32>,
}

impl ProbabilityVolume {
    /// Builds a volume after checking that every pixel is a distribution.
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if classes == 0 {
            return Err(VolumeError::NoClasses);
        }
        if data.len() != height * width * classes {
            return Err(VolumeError::SizeMismatch {
                height,
                width,
                classes,
                actual: data.len(),
            });
        }
        for (idx, pixel) in data.chunks_exact(classes).enumerate() {
            let (row, col) = (idx / width, idx % width);
            if pixel.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(VolumeError::InvalidValue { row, col });
            }
            let sum: f64 = pixel.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(VolumeError::NotNormalized { row, col, sum });
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Distribution at a flat pixel index (`row * width + col`).
    #[inline]
    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

/// A height x width grid of class ids. Used both for ground truth (where
/// [`IGNORE_LABEL`] marks unlabeled pixels) and for predicted masks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

/// A predicted segmentation; class ids are always below the class count.
pub type SegmentationMask = LabelMap;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, VolumeError> {
        if data.len() != height * width {
            return Err(VolumeError::LabelSizeMismatch {
                height,
                width,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_ignored(&self, index: usize) -> bool {
        self.data[index] == IGNORE_LABEL
    }
}
