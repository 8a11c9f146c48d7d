//! Symmetric positive definite matrices: eigendecomposition, real powers and
//! the matrix geometric mean.
//!
//! An [`SpdMatrix`] keeps its eigendecomposition, so powers and inverses are
//! formed as `V Λ^p Vᵀ` without another decomposition. Eigenvalues are
//! clamped at construction to `floor · λ_max` (default `1e-12`), which keeps
//! inverses and negative powers finite on rank-deficient autocorrelations.

use nalgebra::linalg::SymmetricEigen;

use crate::error::{ensure, Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_RELATIVE_FLOOR: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;
const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: Matrix,
    /// Descending.
    eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    eigenvectors: Matrix,
    eigen_floor: f64,
    floored: usize,
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure!(m.is_square(), Dimension, "eigendecomposition needs a square matrix, got {:?}", m.shape());
    let scale = m.max_abs();
    ensure!(
        m.asymmetry() <= SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE),
        Validation,
        "matrix is not symmetric (max asymmetry {:e}, scale {:e})",
        m.asymmetry(),
        scale
    );
    let n = m.rows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let eig = SymmetricEigen::try_new(m.symmetrized().to_nalgebra(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or_else(|| {
            Error::Numerical(format!(
                "symmetric eigensolver did not converge on a {n}x{n} matrix (max |entry| {scale:e}, trace {:e})",
                m.trace()
            ))
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

impl SpdMatrix {
    pub fn new(m: &Matrix) -> Result<Self> {
        Self::with_floor(m, DEFAULT_RELATIVE_FLOOR)
    }

    /// Builds an SPD matrix, clamping eigenvalues below `relative_floor · λ_max`.
    pub fn with_floor(m: &Matrix, relative_floor: f64) -> Result<Self> {
        ensure!(
            relative_floor > 0.0 && relative_floor < 1.0,
            Validation,
            "relative eigenvalue floor must be in (0, 1)"
        );
        let (mut values, vectors) = sym_eig(m)?;
        let top = values.first().copied().unwrap_or(0.0);
        ensure!(
            top > 0.0,
            Numerical,
            "matrix has no positive eigenvalue (largest {top:e}); cannot be made positive definite"
        );
        let floor = relative_floor * top;
        let mut floored = 0;
        for v in values.iter_mut() {
            if *v < floor {
                *v = floor;
                floored += 1;
            }
        }
        let matrix = if floored > 0 {
            compose(&vectors, &values)
        } else {
            m.symmetrized()
        };
        Ok(Self {
            matrix,
            eigenvalues: values,
            eigenvectors: vectors,
            eigen_floor: floor,
            floored,
        })
    }

    fn from_parts(vectors: Matrix, values: Vec<f64>, floor: f64, floored: usize) -> Self {
        Self {
            matrix: compose(&vectors, &values),
            eigenvalues: values,
            eigenvectors: vectors,
            eigen_floor: floor,
            floored,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Matrix {
        &self.eigenvectors
    }

    pub fn eigen_floor(&self) -> f64 {
        self.eigen_floor
    }

    /// Number of eigenvalues raised to the floor at construction.
    pub fn floored_count(&self) -> usize {
        self.floored
    }

    pub fn condition_number(&self) -> f64 {
        self.eigenvalues[0] / self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn power(&self, p: f64) -> SpdMatrix {
        spd_power(self, p)
    }

    pub fn inverse(&self) -> SpdMatrix {
        spd_power(self, -1.0)
    }

    /// Principal `k×k` sub-block starting at `start`, re-decomposed.
    pub fn sub_block(&self, start: usize, k: usize) -> Result<SpdMatrix> {
        let block = Matrix::from_fn(k, k, |i, j| self.matrix.get(start + i, start + j));
        SpdMatrix::new(&block)
    }
}

fn compose(vectors: &Matrix, values: &[f64]) -> Matrix {
    let n = values.len();
    let scaled = Matrix::from_fn(n, n, |i, j| vectors.get(i, j) * values[j]);
    scaled
        .matmul_t(vectors)
        .expect("square factors")
        .symmetrized()
}

/// `V Λ^p Vᵀ`.
pub fn spd_power(m: &SpdMatrix, p: f64) -> SpdMatrix {
    if p < 0.0 && m.floored > 0 {
        log::warn!(
            "raising an SPD matrix with {} floored eigenvalue(s) to the power {p}; result is dominated by the floor {:e}",
            m.floored,
            m.eigen_floor
        );
    }
    let mut pairs: Vec<(f64, usize)> = m
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, v)| (v.powf(p), i))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = m.dim();
    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| m.eigenvectors.get(r, pairs[c].1));
    let floor = m.eigen_floor.powf(p);
    SpdMatrix::from_parts(vectors, values, floor, m.floored)
}

/// Matrix geometric mean `A # B = A^½ (A^-½ B A^-½)^½ A^½`.
///
/// The mean is symmetric in its arguments, so the better-conditioned operand
/// is used as the outer factor.
pub fn geometric_mean(a: &SpdMatrix, b: &SpdMatrix) -> Result<SpdMatrix> {
    ensure!(
        a.dim() == b.dim(),
        Validation,
        "geometric mean of {0}x{0} and {1}x{1} matrices",
        a.dim(),
        b.dim()
    );
    let (outer, inner) = if a.condition_number() <= b.condition_number() {
        (a, b)
    } else {
        (b, a)
    };
    let half = outer.power(0.5);
    let inv_half = outer.power(-0.5);
    let c = inv_half
        .matrix()
        .matmul(inner.matrix())?
        .matmul(inv_half.matrix())?
        .symmetrized();
    let c_half = SpdMatrix::new(&c)?.power(0.5);
    let g = half
        .matrix()
        .matmul(c_half.matrix())?
        .matmul(half.matrix())?
        .symmetrized();
    SpdMatrix::new(&g)
}
