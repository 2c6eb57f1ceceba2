//! Dense row-major `f64` arrays.
//!
//! Only what an MLP classifier needs: matrix products (plain and with either
//! operand transposed), row-bias addition, ReLU, row-wise softmax and a handful
//! of elementwise maps. Every matrix product accumulates over the shared
//! dimension in ascending order, so each output row depends only on the
//! matching input row; batching rows together never changes their values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NumArray {
    /// Builds an array, checking that `shape` covers `data` and that every
    /// value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let arr = NumArray { shape, data };
        arr.check_finite("constructor")?;
        Ok(arr)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        NumArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        NumArray {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        NumArray {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Stacks equal-length rows into an `n × d` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Shape("no rows".into()));
        }
        let d = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(n * d);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {d}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(n, d, data)
    }

    /// Unchecked constructor for values produced by arithmetic on finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NumArray { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Returns a copy viewed as `rows × cols`.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> NumArray {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        NumArray::from_parts(vec![idx.len(), c], data)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{what}: element {pos} is {}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &NumArray, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &NumArray) -> Result<NumArray> {
        let (m, k) = self.require_matrix("matmul lhs")?;
        let (k2, n) = other.require_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: [{m}×{k}] × [{k2}×{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let out = NumArray::from_parts(vec![m, n], out);
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// `self[m×n] · other[k×n]ᵀ`, giving `m×k`.
    pub fn matmul_transpose_rhs(&self, other: &NumArray) -> Result<NumArray> {
        let (m, n) = self.require_matrix("matmul_transpose_rhs lhs")?;
        let (k, n2) = other.require_matrix("matmul_transpose_rhs rhs")?;
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul_transpose_rhs: [{m}×{n}] × [{k}×{n2}]ᵀ"
            )));
        }
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let a_row = &self.data[i * n..(i + 1) * n];
            for j in 0..k {
                let b_row = &other.data[j * n..(j + 1) * n];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * k + j] = acc;
            }
        }
        let out = NumArray::from_parts(vec![m, k], out);
        out.check_finite("matmul_transpose_rhs")?;
        Ok(out)
    }

    /// `self[m×k]ᵀ · other[m×n]`, giving `k×n`.
    pub fn matmul_transpose_lhs(&self, other: &NumArray) -> Result<NumArray> {
        let (m, k) = self.require_matrix("matmul_transpose_lhs lhs")?;
        let (m2, n) = other.require_matrix("matmul_transpose_lhs rhs")?;
        if m != m2 {
            return Err(Error::Shape(format!(
                "matmul_transpose_lhs: [{m}×{k}]ᵀ × [{m2}×{n}]"
            )));
        }
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let out = NumArray::from_parts(vec![k, n], out);
        out.check_finite("matmul_transpose_lhs")?;
        Ok(out)
    }

    /// Adds a length-`n` bias (shape `[n]` or `[1×n]`) to every row of an `m×n` matrix.
    pub fn add_row_bias(&self, bias: &NumArray) -> Result<NumArray> {
        let (m, n) = self.require_matrix("add_row_bias")?;
        if bias.len() != n {
            return Err(Error::Shape(format!(
                "add_row_bias: bias of {} for {n} columns",
                bias.len()
            )));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(NumArray::from_parts(self.shape.clone(), out))
    }

    /// Column sums of a matrix, returned with shape `[n]`.
    pub fn sum_rows(&self) -> Result<NumArray> {
        let (m, n) = self.require_matrix("sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Ok(NumArray::from_parts(vec![n], out))
    }

    pub fn relu(&self) -> NumArray {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&self) -> Result<NumArray> {
        self.check_finite("softmax input")?;
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(NumArray::from_parts(self.shape.clone(), out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NumArray {
        NumArray::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &NumArray, f: impl Fn(f64, f64) -> f64) -> Result<NumArray> {
        self.same_shape(other, "elementwise")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(NumArray::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &NumArray) -> Result<NumArray> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &NumArray) -> Result<NumArray> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &NumArray) -> Result<NumArray> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> NumArray {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// In-place `self += other`, for gradient accumulation.
    pub(crate) fn accumulate(&mut self, other: &NumArray) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
