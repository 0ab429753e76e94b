//! Dense row-major `f32` matrix used for Q/K/V, outputs and probability maps.

use crate::error::{Error, Result};
use crate::layout::Permutation;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `perm.position_of(i)` of the result is row `i` of `self`.
    pub fn permute_rows(&self, perm: &Permutation) -> Result<Self> {
        if perm.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "permutation of length {} applied to {} rows",
                perm.len(),
                self.rows
            )));
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for src in 0..self.rows {
            out.row_mut(perm.position_of(src)).copy_from_slice(self.row(src));
        }
        Ok(out)
    }

    /// Reorders both axes of a square matrix: `out[P(i)][P(j)] = self[i][j]`.
    pub fn permute_square(&self, perm: &Permutation) -> Result<Self> {
        if self.rows != self.cols || perm.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot conjugate a {}x{} matrix by a permutation of length {}",
                self.rows,
                self.cols,
                perm.len()
            )));
        }
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            let pi = perm.position_of(i);
            let src = self.row(i);
            let dst = out.row_mut(pi);
            for (j, &v) in src.iter().enumerate() {
                dst[perm.position_of(j)] = v;
            }
        }
        Ok(out)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}
