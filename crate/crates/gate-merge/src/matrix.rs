//! Dense row-major f32 matrix, the unit of all weight arithmetic.
//!
//! Values are stored in 32-bit precision; every reduction (dot products,
//! sums, means) accumulates in 64-bit before rounding back to f32.

use crate::error::{Error, Result};

/// Dense 2-D matrix of finite f32 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    /// Builds a matrix, checking the shape/length agreement and that every
    /// entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {idx}",
                data[idx]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("no rows given".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Matrix product with f64 accumulation, result rounded to f32.
    pub fn matmul(&self, other: &WeightMatrix) -> Result<WeightMatrix> {
        self.matmul_scaled(other, 1.0)
    }

    /// Computes `scale * (self @ other)` entirely in f64, rounding once at
    /// the end.
    pub fn matmul_scaled(&self, other: &WeightMatrix, scale: f64) -> Result<WeightMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0f32; self.rows * other.cols];
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0f64;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] as f64
                        * other.data[k * other.cols + j] as f64;
                }
                out[i * other.cols + j] = (acc * scale) as f32;
            }
        }
        WeightMatrix::new(self.rows, other.cols, out)
    }

    /// Elementwise sum; operands must have equal shape.
    pub fn add(&self, delta: &WeightMatrix) -> Result<WeightMatrix> {
        if self.shape() != delta.shape() {
            return Err(Error::Dimension(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, delta.rows, delta.cols
            )));
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&delta.data)
            .map(|(a, b)| (*a as f64 + *b as f64) as f32)
            .collect();
        WeightMatrix::new(self.rows, self.cols, data)
    }

    /// Matrix-vector product in f64 (used by the interference benchmark).
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "vector length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| *w as f64 * *v as f64)
                    .sum()
            })
            .collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| *v as f64 * *v as f64)
            .sum::<f64>()
            .sqrt()
    }
}

/// ℓ2 norm of a vector, accumulated in f64.
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|x| *x as f64 * *x as f64).sum::<f64>().sqrt()
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}
