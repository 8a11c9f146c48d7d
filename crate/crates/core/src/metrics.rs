//! SQNR, concentration, alignment and the SQNR predictor built from them.
//!
//! For a layer `y = W x` quantized with `b_x`/`b_w` bits:
//!
//! * concentration `C(x) = E‖x‖² / E[ρ(x)²]`, `C(W) = Σ‖wᵢ‖² / Σρ(wᵢ)²`
//! * alignment `A(x, W) = E‖Wx‖² / (‖W‖²_F E‖x‖²)
//!   = tr(WᵀW Σx) / (tr(WᵀW) tr(Σx))`
//! * activation-only SQNR `≈ 12 N(b_x)² C(x) A`, weight-only SQNR
//!   `≈ 12 N(b_w)² C(W) A`, and the joint SQNR is their parallel combination
//!   `a ∥ b = (1/a + 1/b)⁻¹`.
//!
//! Alignment is bounded by `A_max = Σ μᵢ / (Σ √μᵢ)²` with `μᵢ` the
//! eigenvalues of the output autocorrelation `Σy = W Σx Wᵀ`; the bound is
//! attained by the transform built in [`crate::transforms::optimal_alignment_transform`].

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::quant::{self, levels, Granularity, QuantConfig, Symmetry};
use crate::rng::{Seed, SeededRng};
use crate::spd::{sym_eig, SpdMatrix};
use crate::synth::Family;
use crate::tensor::{ActivationSet, Matrix};

/// A power ratio expressed in decibels, `10·log₁₀(ratio)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Decibel(pub f64);

impl Decibel {
    /// `None` for non-positive or non-finite ratios.
    pub fn from_ratio(ratio: f64) -> Option<Decibel> {
        let db = 10.0 * ratio.log10();
        (ratio > 0.0 && db.is_finite()).then_some(Decibel(db))
    }

    pub fn to_ratio(self) -> f64 {
        10f64.powf(self.0 / 10.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Decibel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} dB", self.0)
    }
}

/// A non-negative ratio that may be unbounded.
///
/// `Exact` stands for a zero denominator (no quantization error, or a
/// collapsed range); it never enters floating-point arithmetic as `inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    Exact,
}

impl Ratio {
    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Finite(v) => Some(v),
            Ratio::Exact => None,
        }
    }

    pub fn is_exact(self) -> bool {
        matches!(self, Ratio::Exact)
    }

    pub fn db(self) -> Option<Decibel> {
        self.value().and_then(Decibel::from_ratio)
    }

    /// `num / den`, `Exact` when the denominator is zero.
    pub fn of(num: f64, den: f64) -> Ratio {
        if den == 0.0 {
            Ratio::Exact
        } else {
            Ratio::Finite(num / den)
        }
    }

    fn scaled(self, k: f64) -> Ratio {
        match self {
            Ratio::Finite(v) => Ratio::Finite(v * k),
            Ratio::Exact => Ratio::Exact,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.db() {
            Some(db) => db.fmt(f),
            None if self.is_exact() => f.write_str("exact"),
            None => f.write_str("-inf dB"),
        }
    }
}

/// `E‖signal‖² / E‖signal - noisy‖²` over tokens (rows).
pub fn sqnr(signal: &Matrix, noisy: &Matrix) -> Result<Ratio> {
    signal.check_same_shape(noisy, "sqnr")?;
    let power = signal.frobenius_sq();
    ensure!(power > 0.0, UndefinedMetric, "signal has zero energy, SQNR undefined");
    let noise: f64 = signal
        .as_slice()
        .iter()
        .zip(noisy.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(Ratio::of(power, noise))
}

/// Harmonic combination `(1/a + 1/b)⁻¹`; `a ∥ Exact = a`.
pub fn parallel(a: Ratio, b: Ratio) -> Result<Ratio> {
    for r in [a, b] {
        if let Ratio::Finite(v) = r {
            ensure!(v > 0.0, Validation, "parallel needs positive ratios, got {v}");
        }
    }
    Ok(match (a, b) {
        (Ratio::Exact, other) | (other, Ratio::Exact) => other,
        (Ratio::Finite(x), Ratio::Finite(y)) => Ratio::Finite(1.0 / (1.0 / x + 1.0 / y)),
    })
}

/// `Σ ‖rowᵢ‖² / Σ ρᵢ²` where `ρᵢ` is the width of the range used for row `i`
/// under `cfg` (per-tensor ranges apply to every row).
pub fn concentration(m: &Matrix, cfg: &QuantConfig) -> Result<Ratio> {
    let ranges = quant::group_ranges(m, cfg)?;
    let energy = m.frobenius_sq();
    let range_sq: f64 = match cfg.granularity {
        Granularity::PerTensor => m.rows() as f64 * ranges[0].width().powi(2),
        _ => ranges.iter().map(|r| r.width().powi(2)).sum(),
    };
    ensure!(
        energy > 0.0 || range_sq > 0.0,
        UndefinedMetric,
        "all-zero data: concentration undefined"
    );
    Ok(Ratio::of(energy, range_sq))
}

/// Concentration of per-token dynamically quantized activations.
pub fn concentration_activations(x: &ActivationSet, symmetry: Symmetry) -> Result<Ratio> {
    concentration(x.matrix(), &QuantConfig::activations(8).with_symmetry(symmetry))
}

/// Concentration of per-row dynamically quantized weights.
pub fn concentration_weights(w: &Matrix, symmetry: Symmetry) -> Result<Ratio> {
    if let Some(i) = w.row_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::Validation(format!("weight row {i} is all zeros")));
    }
    concentration(w, &QuantConfig::weights(8).with_symmetry(symmetry))
}

/// Sample autocorrelation `E[x xᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Autocorrelation {
    matrix: Matrix,
    sample_count: usize,
}

impl Autocorrelation {
    /// Wraps a known autocorrelation, e.g. an exact population value.
    pub fn from_matrix(matrix: Matrix, sample_count: usize) -> Result<Self> {
        ensure!(matrix.is_square(), Dimension, "autocorrelation must be square");
        let scale = matrix.max_abs().max(f64::MIN_POSITIVE);
        ensure!(
            matrix.asymmetry() <= 1e-10 * scale,
            Validation,
            "autocorrelation is not symmetric"
        );
        Ok(Self {
            matrix: matrix.symmetrized(),
            sample_count,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `Σ + ε (tr Σ / d) I` as an SPD matrix, for use where `Σ⁻¹` is needed.
    pub fn regularized(&self, eps: f64) -> Result<SpdMatrix> {
        ensure!(eps >= 0.0 && eps.is_finite(), Validation, "eps must be >= 0, got {eps}");
        let d = self.dim();
        let shift = eps * self.matrix.trace() / d as f64;
        let m = Matrix::from_fn(d, d, |i, j| {
            self.matrix.get(i, j) + if i == j { shift } else { 0.0 }
        });
        SpdMatrix::new(&m)
    }
}

pub const DEFAULT_EPS: f64 = 1e-6;

pub fn autocorrelation(x: &ActivationSet) -> Result<Autocorrelation> {
    if x.tokens() < x.channels() {
        log::warn!(
            "autocorrelation from {} tokens over {} channels is rank deficient",
            x.tokens(),
            x.channels()
        );
    }
    let m = x.matrix().t_matmul(x.matrix())?.scale(1.0 / x.tokens() as f64);
    Ok(Autocorrelation {
        matrix: m.symmetrized(),
        sample_count: x.tokens(),
    })
}

/// `tr(W Σx Wᵀ)`.
fn output_energy(w: &Matrix, sigma_x: &Matrix) -> Result<f64> {
    let ws = w.matmul(sigma_x)?;
    Ok(ws.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum())
}

/// Trace-form alignment `tr(WᵀW Σx) / (tr(WᵀW) tr(Σx))` against any PSD `Σx`.
pub fn alignment_with(w: &Matrix, sigma_x: &Matrix) -> Result<f64> {
    ensure!(
        sigma_x.is_square() && sigma_x.rows() == w.cols(),
        Dimension,
        "alignment: weight has {} inputs, autocorrelation is {}x{}",
        w.cols(),
        sigma_x.rows(),
        sigma_x.cols()
    );
    let tw = w.frobenius_sq();
    let tx = sigma_x.trace();
    ensure!(
        tw > 0.0 && tx > 0.0,
        UndefinedMetric,
        "alignment undefined for zero weight or zero activation energy"
    );
    Ok(output_energy(w, sigma_x)? / (tw * tx))
}

pub fn alignment(w: &Matrix, sigma_x: &Autocorrelation) -> Result<f64> {
    alignment_with(w, sigma_x.matrix())
}

/// Sample-form alignment `E‖Wx‖² / (‖W‖²_F E‖x‖²)`.
pub fn alignment_from_samples(w: &Matrix, x: &ActivationSet) -> Result<f64> {
    let y = x.apply(w)?;
    let tw = w.frobenius_sq();
    let tx = x.mean_sq_norm();
    ensure!(
        tw > 0.0 && tx > 0.0,
        UndefinedMetric,
        "alignment undefined for zero weight or zero activation energy"
    );
    Ok(y.frobenius_sq() / x.tokens() as f64 / (tw * tx))
}

/// Largest alignment reachable by any invertible transform `x → Mx`,
/// `W → W M⁻¹`: `Σ μᵢ / (Σ √μᵢ)²` over eigenvalues `μᵢ` of `W Σx Wᵀ`.
///
/// The same nonzero spectrum is shared by `Σx^½ WᵀW Σx^½`, which is used
/// instead when the layer has more outputs than inputs.
pub fn max_alignment(w: &Matrix, sigma_x: &SpdMatrix) -> Result<f64> {
    ensure!(
        sigma_x.dim() == w.cols(),
        Dimension,
        "max_alignment: weight has {} inputs, autocorrelation is {}x{}",
        w.cols(),
        sigma_x.dim(),
        sigma_x.dim()
    );
    let gram = if w.rows() <= w.cols() {
        w.matmul(sigma_x.matrix())?.matmul_t(w)?
    } else {
        let root = sigma_x.power(0.5);
        let wr = w.matmul(root.matrix())?;
        wr.t_matmul(&wr)?
    };
    let (mu, _) = sym_eig(&gram.symmetrized())?;
    alignment_bound(&mu)
}

/// `Σ μᵢ / (Σ √μᵢ)²` for a PSD spectrum. Eigenvalues below
/// `d·ε·μ_max` are roundoff on a zero and are dropped, since `√` would
/// inflate them to `~1e-8·√μ_max`.
pub(crate) fn alignment_bound(mu: &[f64]) -> Result<f64> {
    let top = mu.iter().fold(0.0f64, |m, &v| m.max(v));
    ensure!(top > 0.0, UndefinedMetric, "layer output has zero energy");
    let cut = mu.len() as f64 * f64::EPSILON * top;
    let kept = mu.iter().filter(|&&m| m > cut);
    let (sum, sum_sqrt) = kept.fold((0.0, 0.0), |(s, r), &m| (s + m, r + m.sqrt()));
    Ok(sum / (sum_sqrt * sum_sqrt))
}

/// Activation-only SQNR predicted as `12 N(b_x)² C(x) A`.
pub fn predicted_single(bits: u32, c: Ratio, a: f64) -> Ratio {
    c.scaled(12.0 * levels(bits).powi(2) * a)
}

/// `12 (N(b_x)² C(x) ∥ N(b_w)² C(W)) A`.
pub fn predicted_sqnr(b_x: u32, b_w: u32, c_x: Ratio, c_w: Ratio, a: f64) -> Result<Ratio> {
    ensure!(a > 0.0, Validation, "alignment must be positive, got {a}");
    for c in [c_x, c_w] {
        if let Ratio::Finite(v) = c {
            ensure!(v > 0.0, Validation, "concentration must be positive, got {v}");
        }
    }
    let x_side = c_x.scaled(levels(b_x).powi(2));
    let w_side = c_w.scaled(levels(b_w).powi(2));
    Ok(parallel(x_side, w_side)?.scaled(12.0 * a))
}

/// `r = N(b_x)² C(x) / (N(b_w)² C(W))`, the predicted ratio of
/// activation-only to weight-only SQNR (alignment cancels).
pub fn sqnr_ratio_r(b_x: u32, b_w: u32, c_x: Ratio, c_w: Ratio) -> Ratio {
    let nx = levels(b_x).powi(2);
    let nw = levels(b_w).powi(2);
    match (c_x, c_w) {
        (Ratio::Exact, _) => Ratio::Exact,
        (Ratio::Finite(x), Ratio::Exact) => Ratio::Finite(0.0 * x),
        (Ratio::Finite(x), Ratio::Finite(w)) => Ratio::Finite(nx * x / (nw * w)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConcentration {
    pub value: f64,
    /// Delta-method standard error of the ratio-of-means estimator.
    pub std_error: f64,
    pub trials: usize,
}

/// Monte-Carlo concentration of `d` i.i.d. draws from `family`.
pub fn reference_concentration(
    family: Family,
    d: usize,
    symmetry: Symmetry,
    trials: usize,
    seed: Seed,
) -> Result<ReferenceConcentration> {
    ensure!(trials >= 1000, Validation, "reference concentration needs >= 1000 trials, got {trials}");
    ensure!(d >= 1, Validation, "d must be >= 1");
    family.validate()?;
    const CHUNK: usize = 256;
    let chunks = trials.div_ceil(CHUNK);
    // (Σa, Σb, Σa², Σb², Σab) with a = ‖x‖², b = ρ²
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = SeededRng::new(seed.derive(c as u64));
            let mut buf = vec![0.0; d];
            let mut acc = [0.0f64; 5];
            for _ in (c * CHUNK)..((c + 1) * CHUNK).min(trials) {
                buf.iter_mut().for_each(|v| *v = family.sample(&mut rng));
                let a: f64 = buf.iter().map(|v| v * v).sum();
                let r = quant::compute_range(&buf, symmetry).expect("nonempty finite").width();
                let b = r * r;
                acc[0] += a;
                acc[1] += b;
                acc[2] += a * a;
                acc[3] += b * b;
                acc[4] += a * b;
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([0.0f64; 5], |mut t, a| {
            t.iter_mut().zip(a).for_each(|(t, a)| *t += a);
            t
        });
    let n = trials as f64;
    let (ma, mb) = (sums[0] / n, sums[1] / n);
    ensure!(mb > 0.0, UndefinedMetric, "all draws collapsed to one value");
    let c = ma / mb;
    let va = sums[2] / n - ma * ma;
    let vb = sums[3] / n - mb * mb;
    let cab = sums[4] / n - ma * mb;
    let var = ((va - 2.0 * c * cab + c * c * vb) / (n * mb * mb)).max(0.0);
    Ok(ReferenceConcentration {
        value: c,
        std_error: var.sqrt(),
        trials,
    })
}
