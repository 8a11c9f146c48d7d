//! Function-preserving transforms `W x = (W T⁻¹)(T x)`.
//!
//! A transform acts on activations as `x → T x` and on weights as
//! `W → W T⁻¹`. Diagonal scalings follow the same rule: a scaling vector `s`
//! that moves activation outliers into the weights is the transform
//! `T = diag(s)⁻¹`, i.e. `x → x / s`, `W → W diag(s)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::{autocorrelation, Autocorrelation, DEFAULT_EPS};
use crate::rng::{Seed, SeededRng};
use crate::spd::{geometric_mean, SpdMatrix};
use crate::synth::random_orthogonal;
use crate::tensor::{ActivationSet, LinearLayer, Matrix};

/// Largest tolerated `‖T T⁻¹ - I‖_max`.
pub const MAX_RESIDUAL: f64 = 1e-8;
/// Block size used when none is given.
pub const DEFAULT_BLOCK: usize = 128;

/// Sylvester-Hadamard matrix scaled to be orthogonal (entries `±1/√d`).
pub fn hadamard_matrix(d: usize) -> Result<Matrix> {
    ensure!(
        d.is_power_of_two(),
        Validation,
        "Hadamard transform needs a power-of-two dimension, got {d}; use random_orthogonal (ortho:<seed>) instead"
    );
    let scale = 1.0 / (d as f64).sqrt();
    Ok(Matrix::from_fn(d, d, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            scale
        } else {
            -scale
        }
    }))
}

/// Orthonormal fast Walsh–Hadamard transform in natural (Sylvester) order.
pub fn fwht_in_place(v: &mut [f64]) {
    let n = v.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= scale);
}

fn fwht_rows(m: &mut Matrix) -> Result<()> {
    ensure!(
        m.cols().is_power_of_two(),
        Validation,
        "Hadamard transform needs a power-of-two dimension, got {}; use random_orthogonal (ortho:<seed>) instead",
        m.cols()
    );
    use rayon::prelude::*;
    let cols = m.cols();
    m.as_mut_slice().par_chunks_mut(cols).for_each(fwht_in_place);
    Ok(())
}

/// `H x` for every token, in `O(n d log d)`.
pub fn apply_fwht(x: &ActivationSet) -> Result<ActivationSet> {
    let mut m = x.matrix().clone();
    fwht_rows(&mut m)?;
    Ok(ActivationSet::from_matrix_unchecked(m))
}

/// An invertible transform ready to apply: `T = H^h · M` where `M` is dense
/// (possibly block diagonal or diagonal) and `h ∈ {0, 1}` marks a trailing
/// Hadamard rotation.
#[derive(Debug, Clone)]
pub struct AppliedTransform {
    m: Matrix,
    m_inv: Matrix,
    hadamard_after: bool,
    residual: f64,
}

impl AppliedTransform {
    pub fn new(m: Matrix, m_inv: Matrix, hadamard_after: bool) -> Result<Self> {
        ensure!(
            m.is_square() && m.shape() == m_inv.shape(),
            Dimension,
            "transform factors must be square and matching, got {:?} and {:?}",
            m.shape(),
            m_inv.shape()
        );
        if hadamard_after {
            ensure!(
                m.rows().is_power_of_two(),
                Validation,
                "Hadamard transform needs a power-of-two dimension, got {}; use random_orthogonal (ortho:<seed>) instead",
                m.rows()
            );
        }
        let residual = m.matmul(&m_inv)?.max_abs_diff(&Matrix::identity(m.rows()))?;
        if !(residual <= MAX_RESIDUAL) {
            return Err(Error::Numerical(format!(
                "transform inverse residual {residual:e} exceeds {MAX_RESIDUAL:e} (max |T| {:e}, max |T⁻¹| {:e})",
                m.max_abs(),
                m_inv.max_abs()
            )));
        }
        Ok(Self {
            m,
            m_inv,
            hadamard_after,
            residual,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            m: Matrix::identity(d),
            m_inv: Matrix::identity(d),
            hadamard_after: false,
            residual: 0.0,
        }
    }

    pub fn hadamard(d: usize) -> Result<Self> {
        Self::new(Matrix::identity(d), Matrix::identity(d), true)
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn has_hadamard(&self) -> bool {
        self.hadamard_after
    }

    /// Dense `T`.
    pub fn t(&self) -> Matrix {
        if self.hadamard_after {
            let mut mt = self.m.transpose();
            fwht_rows(&mut mt).expect("checked at construction");
            mt.transpose()
        } else {
            self.m.clone()
        }
    }

    /// Dense `T⁻¹`.
    pub fn t_inv(&self) -> Matrix {
        let mut inv = self.m_inv.clone();
        if self.hadamard_after {
            fwht_rows(&mut inv).expect("checked at construction");
        }
        inv
    }

    /// `T x` for every token.
    pub fn apply_activations(&self, x: &ActivationSet) -> Result<ActivationSet> {
        ensure!(
            x.channels() == self.dim(),
            Dimension,
            "transform is {}-dimensional, activations have {} channels",
            self.dim(),
            x.channels()
        );
        let mut out = x.matrix().matmul_t(&self.m)?;
        if self.hadamard_after {
            fwht_rows(&mut out)?;
        }
        Ok(ActivationSet::from_matrix_unchecked(out))
    }

    /// `W T⁻¹`.
    pub fn apply_weight(&self, w: &Matrix) -> Result<Matrix> {
        ensure!(
            w.cols() == self.dim(),
            Dimension,
            "transform is {}-dimensional, weight has {} inputs",
            self.dim(),
            w.cols()
        );
        let mut out = w.matmul(&self.m_inv)?;
        if self.hadamard_after {
            // (W M⁻¹) Hᵀ with H symmetric
            fwht_rows(&mut out)?;
        }
        Ok(out)
    }

    /// `T Σ Tᵀ`.
    pub fn apply_autocorrelation(&self, sigma: &Autocorrelation) -> Result<Autocorrelation> {
        let t = self.t();
        let m = t.matmul(sigma.matrix())?.matmul_t(&t)?;
        Autocorrelation::from_matrix(m.symmetrized(), sigma.sample_count())
    }
}

/// Output of [`channel_scaling`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScaling {
    pub scales: Vec<f64>,
    /// Channels whose scale could not be formed and were left at 1.
    pub flagged: Vec<usize>,
}

impl ChannelScaling {
    pub fn transform(&self) -> Result<AppliedTransform> {
        let inv: Vec<f64> = self.scales.iter().map(|s| 1.0 / s).collect();
        AppliedTransform::new(Matrix::from_diagonal(&inv), Matrix::from_diagonal(&self.scales), false)
    }
}

/// Per-channel scales `sᵢ = (max |xᵢ|)^α / (max_j |w_ji|)^(1-α)`.
pub fn channel_scaling(w: &Matrix, x: &ActivationSet, alpha: f64) -> Result<ChannelScaling> {
    ensure!(
        (0.0..=1.0).contains(&alpha),
        Validation,
        "scaling exponent must be in [0, 1], got {alpha}"
    );
    ensure!(
        w.cols() == x.channels(),
        Dimension,
        "weight has {} inputs, activations have {} channels",
        w.cols(),
        x.channels()
    );
    let x_max = x.channel_abs_max();
    let mut w_max = vec![0.0f64; w.cols()];
    for r in w.row_iter() {
        for (m, v) in w_max.iter_mut().zip(r) {
            *m = m.max(v.abs());
        }
    }
    let mut flagged = Vec::new();
    let scales = x_max
        .iter()
        .zip(&w_max)
        .enumerate()
        .map(|(i, (&xm, &wm))| {
            let s = xm.powf(alpha) / wm.powf(1.0 - alpha);
            if s.is_finite() && s > 0.0 {
                s
            } else {
                flagged.push(i);
                1.0
            }
        })
        .collect();
    Ok(ChannelScaling { scales, flagged })
}

/// `M̂ = (Σw # Σx⁻¹)^½`, the symmetric transform maximising alignment.
pub fn optimal_alignment_transform(sigma_w: &SpdMatrix, sigma_x: &SpdMatrix) -> Result<SpdMatrix> {
    ensure!(
        sigma_w.dim() == sigma_x.dim(),
        Validation,
        "Σw is {0}x{0} but Σx is {1}x{1}",
        sigma_w.dim(),
        sigma_x.dim()
    );
    let p = geometric_mean(sigma_w, &sigma_x.inverse()).map_err(|e| {
        Error::Numerical(format!(
            "geometric mean failed (cond Σw {:e}, cond Σx {:e}): {e}",
            sigma_w.condition_number(),
            sigma_x.condition_number()
        ))
    })?;
    Ok(p.power(0.5))
}

/// `‖M Σx M - M⁻¹ Σw M⁻¹‖_max` relative to the larger side's max entry.
pub fn matched_space_residual(m: &SpdMatrix, sigma_w: &SpdMatrix, sigma_x: &SpdMatrix) -> Result<f64> {
    let inv = m.inverse();
    let left = m.matrix().matmul(sigma_x.matrix())?.matmul(m.matrix())?;
    let right = inv.matrix().matmul(sigma_w.matrix())?.matmul(inv.matrix())?;
    let scale = left.max_abs().max(right.max_abs());
    Ok(left.max_abs_diff(&right)? / scale)
}

/// `WᵀW`.
pub fn weight_autocorrelation(w: &Matrix) -> Result<Matrix> {
    Ok(w.t_matmul(w)?.symmetrized())
}

fn block_weight_autocorrelation(w: &Matrix, start: usize, k: usize) -> Result<Matrix> {
    let cols = Matrix::from_fn(w.rows(), k, |i, j| w.get(i, start + j));
    weight_autocorrelation(&cols)
}

/// Block-diagonal alignment transform on contiguous channel blocks of size
/// `k`, optionally followed by a full Hadamard rotation.
///
/// Each block is the optimal alignment transform for the matching diagonal
/// blocks of `Σw = WᵀW` and `Σx`. With `k = 1` the blocks reduce to
/// `mᵢ = ((Σw)ᵢᵢ / (Σx)ᵢᵢ)^¼` applied as `x → m x`.
pub fn cat_block(w: &Matrix, sigma_x: &SpdMatrix, k: usize, hadamard_after: bool) -> Result<AppliedTransform> {
    let d = w.cols();
    ensure!(
        sigma_x.dim() == d,
        Dimension,
        "weight has {d} inputs, Σx is {0}x{0}",
        sigma_x.dim()
    );
    ensure!(k >= 1 && d % k == 0, Validation, "block size {k} does not divide {d}");
    if hadamard_after {
        ensure!(
            d.is_power_of_two(),
            Validation,
            "Hadamard transform needs a power-of-two dimension, got {d}; use random_orthogonal (ortho:<seed>) instead"
        );
    }
    let mut m = Matrix::zeros(d, d);
    let mut m_inv = Matrix::zeros(d, d);
    for start in (0..d).step_by(k) {
        let sw = SpdMatrix::new(&block_weight_autocorrelation(w, start, k)?)?;
        let sx = sigma_x.sub_block(start, k)?;
        let mb = optimal_alignment_transform(&sw, &sx)?;
        let mb_inv = mb.inverse();
        for i in 0..k {
            for j in 0..k {
                m.set(start + i, start + j, mb.matrix().get(i, j));
                m_inv.set(start + i, start + j, mb_inv.matrix().get(i, j));
            }
        }
    }
    AppliedTransform::new(m, m_inv, hadamard_after)
}

/// Diagonal transform with `mᵢ = √(E[xᵢ²] / Σⱼ w_jᵢ²)` read in the
/// channel-scaling convention (`x → x / m`, `W → W diag(m)`), the
/// alternative closed form for single-channel blocks. Kept to compare its
/// alignment with the `k = 1` block transform, which uses the fourth root.
pub fn printed_diagonal(w: &Matrix, sigma_x: &Autocorrelation) -> Result<AppliedTransform> {
    ensure!(
        sigma_x.dim() == w.cols(),
        Dimension,
        "weight has {} inputs, Σx is {1}x{1}",
        w.cols(),
        sigma_x.dim()
    );
    let col_sq: Vec<f64> = (0..w.cols())
        .map(|j| w.row_iter().map(|r| r[j] * r[j]).sum())
        .collect();
    let m: Vec<f64> = sigma_x
        .matrix()
        .diagonal()
        .iter()
        .zip(&col_sq)
        .map(|(sx, sw)| {
            let v = (sx / sw).sqrt();
            if v.is_finite() && v > 0.0 {
                v
            } else {
                1.0
            }
        })
        .collect();
    let inv: Vec<f64> = m.iter().map(|v| 1.0 / v).collect();
    AppliedTransform::new(Matrix::from_diagonal(&inv), Matrix::from_diagonal(&m), false)
}

/// The kinds of transform the toolkit can calibrate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    ChannelScaling { alpha: f64 },
    Hadamard,
    RandomOrthogonal { seed: u64 },
    OptimalFull,
    CatBlock { k: usize, hadamard_after: bool },
    PrintedDiagonal,
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformKind::Identity => f.write_str("none"),
            TransformKind::ChannelScaling { alpha } => write!(f, "scale:{alpha}"),
            TransformKind::Hadamard => f.write_str("hadamard"),
            TransformKind::RandomOrthogonal { seed } => write!(f, "ortho:{seed}"),
            TransformKind::OptimalFull => f.write_str("opt"),
            TransformKind::CatBlock { k, hadamard_after } => {
                write!(f, "cat:{k}{}", if *hadamard_after { "+h" } else { "" })
            }
            TransformKind::PrintedDiagonal => f.write_str("diag-printed"),
        }
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    /// Parses `none`, `scale:α`, `hadamard`, `ortho:seed`, `opt`, `cat:k`,
    /// `cat:k+h` (also `cat:k,+h`) and `diag-printed`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Validation(format!("transform '{s}': {why}"));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        match (head, arg) {
            ("none" | "identity", None) => Ok(TransformKind::Identity),
            ("hadamard", None) => Ok(TransformKind::Hadamard),
            ("opt", None) => Ok(TransformKind::OptimalFull),
            ("diag-printed", None) => Ok(TransformKind::PrintedDiagonal),
            ("scale", Some(a)) => {
                let alpha: f64 = a.parse().map_err(|_| bad("alpha is not a number"))?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(bad("alpha must be in [0, 1]"));
                }
                Ok(TransformKind::ChannelScaling { alpha })
            }
            ("ortho", Some(a)) => Ok(TransformKind::RandomOrthogonal {
                seed: a.parse().map_err(|_| bad("seed is not an unsigned integer"))?,
            }),
            ("cat", Some(a)) => {
                let (k, h) = match a.strip_suffix("+h") {
                    Some(rest) => (rest.trim_end_matches(','), true),
                    None => (a, false),
                };
                let k: usize = k.parse().map_err(|_| bad("block size is not an integer"))?;
                if k == 0 {
                    return Err(bad("block size must be positive"));
                }
                Ok(TransformKind::CatBlock { k, hadamard_after: h })
            }
            _ => Err(bad(
                "expected none, scale:<alpha>, hadamard, ortho:<seed>, opt, cat:<k>[+h] or diag-printed",
            )),
        }
    }
}

/// A transform kind together with its calibration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// `Σx` regularisation `ε` used wherever `Σx⁻¹` is formed.
    pub eps: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        Self { kind, eps: DEFAULT_EPS }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Calibrates the transform for weight `w` on its (pre-transform) inputs.
    pub fn calibrate(&self, w: &Matrix, x: &ActivationSet) -> Result<AppliedTransform> {
        ensure!(
            w.cols() == x.channels(),
            Dimension,
            "weight has {} inputs, activations have {} channels",
            w.cols(),
            x.channels()
        );
        let d = w.cols();
        match self.kind {
            TransformKind::Identity => Ok(AppliedTransform::identity(d)),
            TransformKind::Hadamard => AppliedTransform::hadamard(d),
            TransformKind::ChannelScaling { alpha } => {
                let cs = channel_scaling(w, x, alpha)?;
                if !cs.flagged.is_empty() {
                    log::warn!("channel scaling left {} degenerate channel(s) unscaled", cs.flagged.len());
                }
                cs.transform()
            }
            TransformKind::RandomOrthogonal { seed } => {
                let q = random_orthogonal(d, &mut SeededRng::new(Seed(seed)));
                let qt = q.transpose();
                AppliedTransform::new(q, qt, false)
            }
            TransformKind::OptimalFull => {
                let sx = autocorrelation(x)?.regularized(self.eps)?;
                let sw = SpdMatrix::new(&weight_autocorrelation(w)?)?;
                let m = optimal_alignment_transform(&sw, &sx)?;
                let inv = m.inverse();
                AppliedTransform::new(m.matrix().clone(), inv.matrix().clone(), false)
            }
            TransformKind::CatBlock { k, hadamard_after } => {
                let sx = autocorrelation(x)?.regularized(self.eps)?;
                cat_block(w, &sx, k.min(d), hadamard_after)
            }
            TransformKind::PrintedDiagonal => printed_diagonal(w, &autocorrelation(x)?),
        }
    }
}

/// Relative output deviation tolerated by [`apply_transform`].
pub const MAX_OUTPUT_DEVIATION: f64 = 1e-8;
const PRESERVATION_PROBE_TOKENS: usize = 64;

/// Returns `(W T⁻¹, T x)`; refuses if the outputs of the first tokens move by
/// more than [`MAX_OUTPUT_DEVIATION`] relative to their largest magnitude.
pub fn apply_transform(
    layer: &LinearLayer,
    x: &ActivationSet,
    t: &AppliedTransform,
) -> Result<(LinearLayer, ActivationSet)> {
    let (mut layers, x2) = transform_layers(std::slice::from_ref(layer), x, t)?;
    Ok((layers.remove(0), x2))
}

/// [`apply_transform`] for several layers reading the same input.
pub fn transform_layers(
    layers: &[LinearLayer],
    x: &ActivationSet,
    t: &AppliedTransform,
) -> Result<(Vec<LinearLayer>, ActivationSet)> {
    let x2 = t.apply_activations(x)?;
    let probe = x.tokens().min(PRESERVATION_PROBE_TOKENS);
    let head = |a: &ActivationSet| {
        Matrix::from_vec_unchecked(probe, a.channels(), a.matrix().as_slice()[..probe * a.channels()].to_vec())
    };
    let (x_head, x2_head) = (head(x), head(&x2));
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        layer.check_input(x)?;
        let w2 = t.apply_weight(layer.weight())?;
        let y = x_head.matmul_t(layer.weight())?;
        let y2 = x2_head.matmul_t(&w2)?;
        let scale = y.max_abs();
        let dev = y.max_abs_diff(&y2)?;
        if scale > 0.0 && dev > MAX_OUTPUT_DEVIATION * scale {
            return Err(Error::Numerical(format!(
                "transform does not preserve layer {}: output deviation {:e} relative (residual {:e})",
                layer.name(),
                dev / scale,
                t.residual()
            )));
        }
        out.push(layer.with_weight(w2));
    }
    Ok((out, x2))
}

/// Stacks layers that read the same input into one layer with all their
/// output rows, so one transform can be calibrated for the group.
pub fn group_layers(layers: &[&LinearLayer]) -> Result<LinearLayer> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Validation("cannot group an empty list of layers".into()))?;
    if layers.len() == 1 {
        return Ok((*first).clone());
    }
    let d_in = first.d_in();
    for l in layers {
        ensure!(
            l.d_in() == d_in,
            Validation,
            "layer {} has {} inputs, {} has {d_in}",
            l.name(),
            l.d_in(),
            first.name()
        );
        ensure!(
            l.group() == first.group(),
            Validation,
            "layer {} is in group {:?}, {} in {:?}",
            l.name(),
            l.group(),
            first.name(),
            first.group()
        );
    }
    let rows: usize = layers.iter().map(|l| l.d_out()).sum();
    let data: Vec<f64> = layers
        .iter()
        .flat_map(|l| l.weight().as_slice().iter().copied())
        .collect();
    let name = first
        .group()
        .map(str::to_string)
        .unwrap_or_else(|| layers.iter().map(|l| l.name()).collect::<Vec<_>>().join("+"));
    LinearLayer::new(name, Matrix::new(rows, d_in, data)?, first.group().map(str::to_string))
}
