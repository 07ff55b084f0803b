//! A minimal dense matrix type for deterministic simulation.
//!
//! Values live in `f64` ("wide precision"). A tensor may carry a storage
//! format tag; every write path then rounds through that format, which is
//! how quantize-on-store is modeled. Arithmetic results are wide (untagged)
//! until explicitly stored through a format. All reductions run in fixed
//! index order, so results are identical across runs.

use crate::lowp::FloatFormatSpec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: ({0}, {1}) vs ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("inner dimensions do not agree: ({0}, {1}) x ({2}, {3})")]
    BadMatmul(usize, usize, usize, usize),
    #[error("data length {0} does not match shape ({1}, {2})")]
    BadDataLength(usize, usize, usize),
    #[error("quantize failed: {0}")]
    Quantize(#[from] crate::lowp::QuantizeError),
}

/// Dense row-major matrix. Vectors are (len, 1) matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    fmt: Option<FloatFormatSpec>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            fmt: None,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadDataLength(data.len(), rows, cols));
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            fmt: None,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            rows: n,
            cols: 1,
            data,
            fmt: None,
        }
    }

    /// Build with a generator, row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor {
            rows,
            cols,
            data,
            fmt: None,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn format(&self) -> Option<&FloatFormatSpec> {
        self.fmt.as_ref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Write one element, rounding through the storage format if tagged.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let v = match &self.fmt {
            Some(f) => f.quantize(v),
            None => v,
        };
        self.data[i * self.cols + j] = v;
    }

    /// A copy of this tensor stored through `fmt`: every element rounded,
    /// and the tag kept so later writes round too.
    pub fn stored_through(&self, fmt: FloatFormatSpec) -> Result<Tensor, TensorError> {
        let mut data = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            data.push(fmt.try_quantize(v)?);
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
            fmt: Some(fmt),
        })
    }

    /// Same values, no format tag (wide view for arithmetic).
    pub fn widened(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
            fmt: None,
        }
    }

    /// Elementwise map into a new wide tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
            fmt: None,
        }
    }

    /// Elementwise combine into a new wide tensor.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
            fmt: None,
        })
    }

    /// In-place elementwise update that respects the storage format.
    pub fn update(&mut self, f: impl Fn(f64) -> f64) {
        match &self.fmt {
            Some(fmt) => {
                for v in &mut self.data {
                    *v = fmt.quantize(f(*v));
                }
            }
            None => {
                for v in &mut self.data {
                    *v = f(*v);
                }
            }
        }
    }

    /// In-place elementwise combine with another tensor, respecting the
    /// storage format of `self`.
    pub fn update_with(
        &mut self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(), TensorError> {
        self.check_same_shape(other)?;
        match &self.fmt {
            Some(fmt) => {
                for (v, &o) in self.data.iter_mut().zip(&other.data) {
                    *v = fmt.quantize(f(*v, o));
                }
            }
            None => {
                for (v, &o) in self.data.iter_mut().zip(&other.data) {
                    *v = f(*v, o);
                }
            }
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `op(A) * op(B)` with optional transposes, accumulated in f64 in fixed
    /// k-order. Output is wide.
    pub fn matmul(
        &self,
        other: &Tensor,
        transpose_a: bool,
        transpose_b: bool,
    ) -> Result<Tensor, TensorError> {
        let (m, ka) = if transpose_a {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (kb, n) = if transpose_b {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        if ka != kb {
            return Err(TensorError::BadMatmul(m, ka, kb, n));
        }
        let a_at = |i: usize, k: usize| {
            if transpose_a {
                self.data[k * self.cols + i]
            } else {
                self.data[i * self.cols + k]
            }
        };
        let b_at = |k: usize, j: usize| {
            if transpose_b {
                other.data[j * other.cols + k]
            } else {
                other.data[k * other.cols + j]
            }
        };
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..ka {
                    acc += a_at(i, k) * b_at(k, j);
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// Frobenius norm, accumulated in index order.
    pub fn frobenius_norm(&self) -> f64 {
        self.sum_of_squares().sqrt()
    }

    pub fn sum_of_squares(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `lo..hi` as a new tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        assert!(lo <= hi && hi <= self.cols, "column slice out of range");
        let mut out = Tensor::zeros(self.rows, hi - lo);
        for i in 0..self.rows {
            for j in lo..hi {
                out.data[i * (hi - lo) + (j - lo)] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Rows `lo..hi` as a new tensor.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        assert!(lo <= hi && hi <= self.rows, "row slice out of range");
        Tensor {
            rows: hi - lo,
            cols: self.cols,
            data: self.data[lo * self.cols..hi * self.cols].to_vec(),
            fmt: None,
        }
    }

    /// Concatenate along an axis: 0 stacks rows, 1 joins columns.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "concat of no tensors");
        let first = &parts[0];
        if axis == 0 {
            let cols = first.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                if p.cols != cols {
                    return Err(TensorError::ShapeMismatch(p.rows, p.cols, rows, cols));
                }
                rows += p.rows;
                data.extend_from_slice(&p.data);
            }
            Ok(Tensor {
                rows,
                cols,
                data,
                fmt: None,
            })
        } else {
            let rows = first.rows;
            let cols: usize = parts.iter().map(|p| p.cols).sum();
            for p in parts {
                if p.rows != rows {
                    return Err(TensorError::ShapeMismatch(p.rows, p.cols, rows, cols));
                }
            }
            let mut out = Tensor::zeros(rows, cols);
            for i in 0..rows {
                let mut j0 = 0;
                for p in parts {
                    for j in 0..p.cols {
                        out.data[i * cols + j0 + j] = p.data[i * p.cols + j];
                    }
                    j0 += p.cols;
                }
            }
            Ok(out)
        }
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(
                self.rows, self.cols, other.rows, other.cols,
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowp::{FP16, M169};

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b, false, false).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);

        // op(A) with transpose flags equals explicit transposition.
        let at = a.transpose();
        let c2 = at.matmul(&b, true, false).unwrap();
        assert_eq!(c.data(), c2.data());
        let bt = b.transpose();
        let c3 = a.matmul(&bt, false, true).unwrap();
        assert_eq!(c.data(), c3.data());
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 2);
        assert!(matches!(
            a.matmul(&b, false, false),
            Err(TensorError::BadMatmul(..))
        ));
        assert!(a.matmul(&b, true, false).is_ok());
    }

    #[test]
    fn stored_through_rounds_every_element_and_future_writes() {
        let t = Tensor::from_vec(1, 3, vec![0.1, 1.0, 1e9]).unwrap();
        let q = t.stored_through(FP16).unwrap();
        assert_eq!(q.data(), &[0.0999755859375, 1.0, f64::INFINITY]);
        let mut q = q;
        q.set(0, 0, 0.1);
        assert_eq!(q.get(0, 0), 0.0999755859375);
        q.update(|v| v * 0.0 + 0.3);
        assert_eq!(q.get(0, 1), FP16.quantize(0.3));
    }

    #[test]
    fn update_with_respects_format() {
        let mut buf = Tensor::zeros(1, 2).stored_through(M169).unwrap();
        let g = Tensor::from_vec(1, 2, vec![0.1, 100.0]).unwrap();
        buf.update_with(&g, |b, x| b + x).unwrap();
        assert_eq!(buf.get(0, 0), M169.quantize(0.1));
        assert_eq!(buf.get(0, 1), f64::INFINITY);
    }

    #[test]
    fn frobenius_norm_of_three_four() {
        let t = Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(t.frobenius_norm(), 5.0);
    }

    #[test]
    fn slicing_and_concat_round_trip() {
        let t = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let left = t.slice_cols(0, 2);
        let right = t.slice_cols(2, 4);
        let joined = Tensor::concat(&[left, right], 1).unwrap();
        assert_eq!(joined.data(), t.data());

        let top = t.slice_rows(0, 1);
        let bottom = t.slice_rows(1, 3);
        let stacked = Tensor::concat(&[top, bottom], 0).unwrap();
        assert_eq!(stacked.data(), t.data());
    }

    #[test]
    fn all_finite_detects_contamination() {
        let mut t = Tensor::zeros(2, 2);
        assert!(t.all_finite());
        t.set(1, 1, f64::NAN);
        assert!(!t.all_finite());
    }
}
