//! Dense numeric containers shared by every module.
//!
//! Everything is stored as row-major `f64`. Public constructors reject
//! non-finite entries; arithmetic helpers used internally skip the check.

use nalgebra::DMatrix;

use crate::error::{ensure, Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "matrix {rows}x{cols} needs {} entries, got {}",
            rows * cols,
            data.len()
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec_unchecked(rows, cols, data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Dimension,
            "ragged rows"
        );
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on 0
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        ensure!(
            self.shape() == other.shape(),
            Dimension,
            "{what}: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        ensure!(
            self.cols == other.rows,
            Dimension,
            "matmul: {}x{} times {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1)))
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        ensure!(
            self.cols == other.cols,
            Dimension,
            "matmul_t: {}x{} times ({}x{})^T",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.rows);
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k)))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        ensure!(
            self.rows == other.rows,
            Dimension,
            "t_matmul: ({}x{})^T times {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (m, k, n) = (self.cols, self.rows, other.cols);
        Ok(gemm(m, k, n, &self.data, (1, m), &other.data, (n, 1)))
    }

    /// Returns `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        debug_assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    /// Largest `|m_ij - m_ji|`, zero for non-square input is not defined.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Matrix {
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe the exact row-major (or transposed)
        // layouts of `a` (m×k), `b` (k×n) and `c` (m×n), whose lengths were
        // checked by the callers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Matrix::from_vec_unchecked(m, n, c)
}

/// A batch of activation vectors, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    data: Matrix,
}

impl ActivationSet {
    pub fn new(data: Matrix) -> Result<Self> {
        ensure!(
            data.rows() >= 1 && data.cols() >= 1,
            Validation,
            "activation set needs at least one token and one channel, got {}x{}",
            data.rows(),
            data.cols()
        );
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub(crate) fn from_matrix_unchecked(data: Matrix) -> Self {
        Self { data }
    }

    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn token(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    pub fn token_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.row_iter()
    }

    /// Largest absolute value seen on each channel.
    pub fn channel_abs_max(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.channels()];
        for tok in self.token_iter() {
            for (m, v) in out.iter_mut().zip(tok) {
                *m = m.max(v.abs());
            }
        }
        out
    }

    /// Mean of `‖x‖²` over tokens.
    pub fn mean_sq_norm(&self) -> f64 {
        self.data.frobenius_sq() / self.tokens() as f64
    }

    /// Output of `layer` on every token, `X·Wᵀ` (tokens × d_out).
    pub fn apply(&self, weight: &Matrix) -> Result<Matrix> {
        ensure!(
            weight.cols() == self.channels(),
            Dimension,
            "weight expects {} input channels, activations have {}",
            weight.cols(),
            self.channels()
        );
        self.data.matmul_t(weight)
    }

    /// Stacks token batches that share the channel count.
    pub fn concat(sets: &[&ActivationSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Validation("nothing to concatenate".into()))?;
        let d = first.channels();
        ensure!(
            sets.iter().all(|s| s.channels() == d),
            Dimension,
            "cannot concatenate activation sets with different channel counts"
        );
        let n = sets.iter().map(|s| s.tokens()).sum();
        let data = sets
            .iter()
            .flat_map(|s| s.data.as_slice().iter().copied())
            .collect();
        Ok(Self::from_matrix_unchecked(Matrix::from_vec_unchecked(n, d, data)))
    }
}

/// A linear layer `y = W x` with an optional input-sharing group.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    name: String,
    weight: Matrix,
    group: Option<String>,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, weight: Matrix, group: Option<String>) -> Result<Self> {
        let name = name.into();
        ensure!(
            weight.rows() >= 1 && weight.cols() >= 1,
            Validation,
            "layer {name}: empty weight"
        );
        if let Some(i) = weight.row_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Validation(format!(
                "layer {name}: row {i} is all zeros, quantization range undefined"
            )));
        }
        Ok(Self {
            name,
            weight,
            group,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn group(&self) -> Option<&str> {
        self.group.as_deref()
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn with_weight(&self, weight: Matrix) -> Self {
        Self {
            name: self.name.clone(),
            weight,
            group: self.group.clone(),
        }
    }

    pub fn check_input(&self, x: &ActivationSet) -> Result<()> {
        ensure!(
            x.channels() == self.d_in(),
            Dimension,
            "layer {} expects {} input channels, activations have {}",
            self.name,
            self.d_in(),
            x.channels()
        );
        Ok(())
    }
}
