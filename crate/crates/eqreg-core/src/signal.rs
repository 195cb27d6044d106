//! Flattened grayscale images with shape metadata.
//!
//! Images live in `R^n` as column-stacked vectors: the pixel at row `h`,
//! column `k` of an `rows x cols` image sits at linear index `k * rows + h`.
//! Every module in this crate shares that single convention.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// A grayscale image `u` as a flat vector plus its `rows x cols` shape.
///
/// Dataset normalization maps pixels into `[-1, 1]`; noisy measurements may
/// leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSignal {
    data: Array1<f64>,
    rows: usize,
    cols: usize,
}

impl ImageSignal {
    pub fn new(data: Array1<f64>, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "image shape must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("ImageSignal::new", rows * cols, data.len()));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: Array1::zeros(rows * cols),
            rows,
            cols,
        }
    }

    /// Column-stacks a `rows x cols` matrix into a flat signal.
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (rows, cols) = m.dim();
        let mut data = Array1::zeros(rows * cols);
        for k in 0..cols {
            for h in 0..rows {
                data[k * rows + h] = m[[h, k]];
            }
        }
        Self { data, rows, cols }
    }

    /// Inverse of [`from_matrix`](Self::from_matrix).
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows, self.cols));
        for k in 0..self.cols {
            for h in 0..self.rows {
                m[[h, k]] = self.data[k * self.rows + h];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Array1<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array1<f64> {
        self.data
    }

    /// Pixel at image row `h`, column `k`.
    pub fn get(&self, h: usize, k: usize) -> f64 {
        self.data[k * self.rows + h]
    }

    pub fn set(&mut self, h: usize, k: usize, value: f64) {
        self.data[k * self.rows + h] = value;
    }

    /// Rebuilds a signal with this signal's shape around new data.
    pub fn with_data(&self, data: Array1<f64>) -> Result<Self> {
        Self::new(data, self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Linear index of pixel `(h, k)` under the column-stacking convention.
pub fn stack_index(rows: usize, h: usize, k: usize) -> usize {
    k * rows + h
}
