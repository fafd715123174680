//! Dense row-major matrices and the handful of operations the rest of the
//! library is built on: plain matmul, batched matmul, and truncated SVD.
//!
//! Everything is `f64` and single-threaded on purpose. The point of this
//! crate is verifiable arithmetic, not throughput.

mod svd;

pub use svd::{truncated_svd, TruncatedSvdResult};

use crate::error::{Error, Result};
use std::ops::Range;

/// Dense row-major matrix. Entries are finite `f64` values; `data.len()`
/// always equals `rows * cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {idx} of a {rows}x{cols} matrix is {}",
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Convenience constructor for tests and small literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Self::new(r, c, rows.concat())
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies a contiguous column range into a new matrix.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.cols || range.start > range.end {
            return Err(Error::Shape(format!(
                "column range {range:?} out of bounds for {} columns",
                self.cols
            )));
        }
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Copies a contiguous row range into a new matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.rows || range.start > range.end {
            return Err(Error::Shape(format!(
                "row range {range:?} out of bounds for {} rows",
                self.rows
            )));
        }
        let height = range.end - range.start;
        Ok(Self {
            rows: height,
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        })
    }

    /// Horizontal concatenation; all inputs must share a row count.
    pub fn hstack(mats: &[&DenseMatrix]) -> Result<Self> {
        let Some(first) = mats.first() else {
            return Err(Error::Shape("hstack of an empty matrix list".into()));
        };
        let rows = first.rows;
        if mats.iter().any(|m| m.rows != rows) {
            return Err(Error::Shape("hstack inputs disagree on row count".into()));
        }
        let cols: usize = mats.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in mats {
                data.extend_from_slice(m.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Vertical concatenation; all inputs must share a column count.
    pub fn vstack(mats: &[&DenseMatrix]) -> Result<Self> {
        let Some(first) = mats.first() else {
            return Err(Error::Shape("vstack of an empty matrix list".into()));
        };
        let cols = first.cols;
        if mats.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape("vstack inputs disagree on column count".into()));
        }
        let rows: usize = mats.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in mats {
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// `a * b` with the textbook shape rule `(m x k) * (k x n) -> (m x n)`.
///
/// Accumulation runs over `k` in ascending order for every output element,
/// so slicing `b` by columns and multiplying the slices reproduces the
/// corresponding columns of the full product bit for bit.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    matmul_into(a.data(), a.rows(), a.cols(), b, out.data_mut());
    Ok(out)
}

/// In-place matmul into a caller-owned buffer of length `a_rows * b.cols()`.
/// Used by the replay path, which must not allocate.
pub fn matmul_into(a: &[f64], a_rows: usize, a_cols: usize, b: &DenseMatrix, out: &mut [f64]) {
    let n = b.cols();
    debug_assert_eq!(a.len(), a_rows * a_cols);
    debug_assert_eq!(a_cols, b.rows());
    debug_assert_eq!(out.len(), a_rows * n);
    out.fill(0.0);
    for i in 0..a_rows {
        for k in 0..a_cols {
            let aik = a[i * a_cols + k];
            let brow = b.row(k);
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// Multiply-add count of `matmul(a, b)`, as `2 * m * k * n`.
pub fn matmul_flops(a: &DenseMatrix, b: &DenseMatrix) -> u64 {
    2 * a.rows() as u64 * a.cols() as u64 * b.cols() as u64
}

/// Independent products of a sequence of matrix pairs, in order.
pub fn batched_matmul(pairs: &[(&DenseMatrix, &DenseMatrix)]) -> Result<Vec<DenseMatrix>> {
    pairs
        .iter()
        .enumerate()
        .map(|(idx, (a, b))| {
            matmul(a, b).map_err(|e| Error::Shape(format!("batch entry {idx}: {e}")))
        })
        .collect()
}

/// `||a - b||_F / max(||b||_F, eps)`; the workhorse metric of the test
/// suites. Falls back to the absolute distance when `b` is (near) zero.
pub fn rel_frobenius_distance(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let diff = match a.sub(b) {
        Ok(d) => d.frobenius_norm(),
        Err(_) => return f64::INFINITY,
    };
    let denom = b.frobenius_norm();
    if denom > 1e-300 {
        diff / denom
    } else {
        diff
    }
}
