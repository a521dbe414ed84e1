//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built on.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` when the trailing axis is treated as columns and every
    /// leading axis is folded into rows. Scalars are `(1, 1)`.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&cols, rest)) => (rest.iter().product(), cols),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Returns the first non-finite entry as an error.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(mismatch());
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Adds a `[n]` row vector to every row of a `[m, n]` matrix.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (_, cols) = self.rows_cols();
        if self.shape.len() != 2 || bias.shape != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Column sums of a `[m, n]` matrix, shape `[n]`.
    pub fn sum_rows(&self) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "sum_rows",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let cols = self.shape[1];
        let mut out = vec![0.0; cols];
        for row in self.data.chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor::vector(out))
    }

    /// Repeats a `[n]` vector as `rows` rows.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor, TensorError> {
        if self.shape.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                left: self.shape.clone(),
                right: vec![rows],
            });
        }
        let mut data = Vec::with_capacity(rows * self.data.len());
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor {
            shape: vec![rows, self.data.len()],
            data,
        })
    }

    /// Sums along the trailing axis, dropping it.
    pub fn sum_cols(&self) -> Tensor {
        let (_, cols) = self.rows_cols();
        let shape = self.shape[..self.shape.len().saturating_sub(1)].to_vec();
        let data = self.data.chunks(cols).map(|r| r.iter().sum()).collect();
        Tensor { shape, data }
    }

    /// Appends a trailing axis of length `cols`, repeating each entry.
    pub fn broadcast_cols(&self, cols: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape.push(cols);
        let mut data = Vec::with_capacity(self.data.len() * cols);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, cols));
        }
        Tensor { shape, data }
    }

    /// Numerically stable log-softmax along the trailing axis.
    pub fn log_softmax(&self) -> Tensor {
        let (_, cols) = self.rows_cols();
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn softmax(&self) -> Tensor {
        self.log_softmax().map(f64::exp)
    }

    /// Index of the largest entry of each row (first wins on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (_, cols) = self.rows_cols();
        self.data
            .chunks(cols)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect()
    }

    /// Gathers the listed rows into a new `[idx.len(), cols]` tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let (_, cols) = self.rows_cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), cols],
            data,
        }
    }
}
