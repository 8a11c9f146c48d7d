//! Simulated uniform integer quantization (quantize then dequantize in f64).
//!
//! A range `[lo, hi]` of width `ρ = hi - lo` is split into `N(b) = 2^b - 1`
//! equal steps of size `s = ρ / N(b)`; a value maps to
//! `lo + round((v - lo) / s) · s` after clamping into the range. Rounding is
//! half-to-even. Symmetric schemes use the same `2^b - 1` steps over
//! `[-m, m]`, so exact zero is not a grid point; reserving a level for zero
//! (`2^b - 2` steps) is a common alternative that this crate does not use.
//!
//! A group whose range has zero width is passed through unchanged and
//! counted as degenerate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{ActivationSet, Matrix};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerRow,
    PerToken,
    PerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantRange {
    pub lo: f64,
    pub hi: f64,
}

impl QuantRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        ensure!(
            lo.is_finite() && hi.is_finite() && hi >= lo,
            Validation,
            "invalid range [{lo}, {hi}]"
        );
        Ok(Self { lo, hi })
    }

    pub fn symmetric(m: f64) -> Result<Self> {
        Self::new(-m.abs(), m.abs())
    }

    /// Range width `ρ`.
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() == 0.0
    }

    pub fn step(&self, bits: u32) -> f64 {
        self.width() / levels(bits)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    /// Range computed from each group's own values.
    Dynamic,
    /// Fixed ranges, one per quantization group, values outside are clamped.
    Static(Vec<QuantRange>),
    /// Per-group range clipped to the given quantile of the values
    /// (`0.5 < q <= 1`). Violates the negligible-clipping assumption the
    /// SQNR predictor relies on; analyses flag it.
    Percentile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub symmetry: Symmetry,
    pub granularity: Granularity,
    pub range_policy: RangePolicy,
}

impl QuantConfig {
    /// Per-row symmetric dynamic weight quantization.
    pub fn weights(bits: u32) -> Self {
        Self {
            bits,
            symmetry: Symmetry::Symmetric,
            granularity: Granularity::PerRow,
            range_policy: RangePolicy::Dynamic,
        }
    }

    /// Per-token asymmetric dynamic activation quantization.
    pub fn activations(bits: u32) -> Self {
        Self {
            bits,
            symmetry: Symmetry::Asymmetric,
            granularity: Granularity::PerToken,
            range_policy: RangePolicy::Dynamic,
        }
    }

    pub fn with_symmetry(mut self, symmetry: Symmetry) -> Self {
        self.symmetry = symmetry;
        self
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn with_policy(mut self, policy: RangePolicy) -> Self {
        self.range_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (MIN_BITS..=MAX_BITS).contains(&self.bits),
            Config,
            "bits must be in [{MIN_BITS}, {MAX_BITS}], got {}",
            self.bits
        );
        match &self.range_policy {
            RangePolicy::Dynamic => {}
            RangePolicy::Static(ranges) => {
                for r in ranges {
                    ensure!(
                        r.hi >= r.lo,
                        Config,
                        "static range [{}, {}] has hi < lo",
                        r.lo,
                        r.hi
                    );
                    if self.symmetry == Symmetry::Symmetric {
                        ensure!(
                            r.lo == -r.hi,
                            Config,
                            "symmetric static range [{}, {}] is not centred",
                            r.lo,
                            r.hi
                        );
                    }
                }
            }
            RangePolicy::Percentile(q) => ensure!(
                *q > 0.5 && *q <= 1.0,
                Config,
                "percentile must be in (0.5, 1], got {q}"
            ),
        }
        Ok(())
    }

    /// Whether the predictor's negligible-clipping assumption is broken by
    /// construction.
    pub fn clips_by_design(&self) -> bool {
        matches!(self.range_policy, RangePolicy::Percentile(q) if q < 1.0)
    }
}

/// `N(b) = 2^b - 1`, the number of quantization steps.
pub fn levels(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

/// `[min, max]` for asymmetric, `[-m, m]` with `m = max |v|` for symmetric.
pub fn compute_range(values: &[f64], symmetry: Symmetry) -> Result<QuantRange> {
    ensure!(!values.is_empty(), Validation, "cannot take the range of an empty vector");
    ensure!(
        values.iter().all(|v| v.is_finite()),
        Validation,
        "range input has non-finite values"
    );
    Ok(match symmetry {
        Symmetry::Asymmetric => {
            let (lo, hi) = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            QuantRange { lo, hi }
        }
        Symmetry::Symmetric => {
            let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            QuantRange { lo: -m, hi: m }
        }
    })
}

fn percentile_range(values: &[f64], symmetry: Symmetry, q: f64) -> QuantRange {
    let pick = |sorted: &[f64], p: f64| {
        let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
        sorted[idx]
    };
    match symmetry {
        Symmetry::Symmetric => {
            let mut a: Vec<f64> = values.iter().map(|v| v.abs()).collect();
            a.sort_by(f64::total_cmp);
            let m = pick(&a, q);
            QuantRange { lo: -m, hi: m }
        }
        Symmetry::Asymmetric => {
            let mut a = values.to_vec();
            a.sort_by(f64::total_cmp);
            QuantRange {
                lo: pick(&a, 1.0 - q),
                hi: pick(&a, q),
            }
        }
    }
}

/// Per-group bookkeeping from one quantization pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantStats {
    pub groups: usize,
    pub degenerate_groups: usize,
    /// Values that fell outside their group's range and were clamped.
    pub clipped_values: usize,
    /// Groups with at least one clipped value.
    pub clipped_groups: usize,
    /// Sum over groups of `ρ²`.
    pub sum_range_sq: f64,
}

impl QuantStats {
    fn merge(mut self, other: QuantStats) -> Self {
        self.groups += other.groups;
        self.degenerate_groups += other.degenerate_groups;
        self.clipped_values += other.clipped_values;
        self.clipped_groups += other.clipped_groups;
        self.sum_range_sq += other.sum_range_sq;
        self
    }
}

/// Quantize-dequantize in place; returns the number of clamped values.
fn quantize_slice(values: &mut [f64], range: QuantRange, bits: u32) -> usize {
    if range.is_degenerate() {
        return 0;
    }
    let s = range.step(bits);
    let mut clipped = 0;
    for v in values.iter_mut() {
        if !range.contains(*v) {
            clipped += 1;
        }
        let c = v.clamp(range.lo, range.hi);
        let q = range.lo + ((c - range.lo) / s).round_ties_even() * s;
        *v = q.clamp(range.lo, range.hi);
    }
    clipped
}

pub fn quantize_dequantize(values: &[f64], range: QuantRange, bits: u32) -> Vec<f64> {
    let mut out = values.to_vec();
    quantize_slice(&mut out, range, bits);
    out
}

fn group_range(values: &[f64], cfg: &QuantConfig, group: usize) -> Result<QuantRange> {
    match &cfg.range_policy {
        RangePolicy::Dynamic => compute_range(values, cfg.symmetry),
        RangePolicy::Static(ranges) => match ranges.as_slice() {
            [only] if cfg.granularity == Granularity::PerTensor => Ok(*only),
            _ => ranges.get(group).copied().ok_or_else(|| {
                Error::Config(format!(
                    "static ranges cover {} groups, group {group} is missing",
                    ranges.len()
                ))
            }),
        },
        RangePolicy::Percentile(q) => Ok(percentile_range(values, cfg.symmetry, *q)),
    }
}

fn check_static_count(cfg: &QuantConfig, groups: usize) -> Result<()> {
    if let RangePolicy::Static(ranges) = &cfg.range_policy {
        ensure!(
            ranges.len() == groups,
            Config,
            "static ranges cover {} groups, data has {groups}",
            ranges.len()
        );
    }
    Ok(())
}

/// Ranges this configuration would use for each group of `m`, where rows are
/// the groups unless the granularity is per-tensor.
pub fn group_ranges(m: &Matrix, cfg: &QuantConfig) -> Result<Vec<QuantRange>> {
    cfg.validate()?;
    match cfg.granularity {
        Granularity::PerTensor => {
            check_static_count(cfg, 1)?;
            Ok(vec![group_range(m.as_slice(), cfg, 0)?])
        }
        Granularity::PerRow | Granularity::PerToken => {
            check_static_count(cfg, m.rows())?;
            m.row_iter()
                .enumerate()
                .map(|(i, r)| group_range(r, cfg, i))
                .collect()
        }
    }
}

fn quantize_matrix(m: &Matrix, cfg: &QuantConfig) -> Result<(Matrix, QuantStats)> {
    let ranges = group_ranges(m, cfg)?;
    let mut out = m.clone();
    let stats = match cfg.granularity {
        Granularity::PerTensor => {
            let r = ranges[0];
            let clipped = quantize_slice(out.as_mut_slice(), r, cfg.bits);
            QuantStats {
                groups: 1,
                degenerate_groups: usize::from(r.is_degenerate()),
                clipped_values: clipped,
                clipped_groups: usize::from(clipped > 0),
                sum_range_sq: r.width().powi(2),
            }
        }
        _ => {
            let cols = m.cols();
            out.as_mut_slice()
                .par_chunks_mut(cols)
                .zip(ranges.par_iter())
                .map(|(row, &r)| {
                    let clipped = quantize_slice(row, r, cfg.bits);
                    QuantStats {
                        groups: 1,
                        degenerate_groups: usize::from(r.is_degenerate()),
                        clipped_values: clipped,
                        clipped_groups: usize::from(clipped > 0),
                        sum_range_sq: r.width().powi(2),
                    }
                })
                .reduce(QuantStats::default, QuantStats::merge)
        }
    };
    Ok((out, stats))
}

pub fn quantize_weights_detailed(w: &Matrix, cfg: &QuantConfig) -> Result<(Matrix, QuantStats)> {
    ensure!(
        cfg.granularity != Granularity::PerToken,
        Config,
        "per_token granularity applies to activations, not weights"
    );
    quantize_matrix(w, cfg)
}

/// Quantizes each weight row with its own range (per_row) or one shared range.
pub fn quantize_weights(w: &Matrix, cfg: &QuantConfig) -> Result<Matrix> {
    quantize_weights_detailed(w, cfg).map(|(m, _)| m)
}

pub fn quantize_activations_detailed(
    x: &ActivationSet,
    cfg: &QuantConfig,
) -> Result<(ActivationSet, QuantStats)> {
    ensure!(
        cfg.granularity != Granularity::PerRow,
        Config,
        "per_row granularity applies to weights, not activations"
    );
    let (m, stats) = quantize_matrix(x.matrix(), cfg)?;
    Ok((ActivationSet::from_matrix_unchecked(m), stats))
}

pub fn quantize_activations(x: &ActivationSet, cfg: &QuantConfig) -> Result<ActivationSet> {
    quantize_activations_detailed(x, cfg).map(|(a, _)| a)
}

/// Static range covering every calibration value (no percentile clipping).
pub fn calibrate_static_range(x: &ActivationSet, symmetry: Symmetry) -> Result<QuantRange> {
    compute_range(x.matrix().as_slice(), symmetry)
}

/// Statistics of the quantization noise `Δ = original - quantized`, with rows
/// as samples and columns as channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Largest `|corr(Δ_i, Δ_j)|` over `i ≠ j`.
    pub cross_channel_corr: f64,
    /// Largest `|corr(x_i, Δ_i)|` over channels.
    pub signal_noise_corr: f64,
    pub samples: usize,
}

impl NoiseStats {
    pub fn max_abs_mean(&self) -> f64 {
        self.mean.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn corr(cov: f64, va: f64, vb: f64) -> f64 {
    if va > 0.0 && vb > 0.0 {
        cov / (va * vb).sqrt()
    } else {
        0.0
    }
}

pub fn noise_stats(original: &Matrix, quantized: &Matrix) -> Result<NoiseStats> {
    original.check_same_shape(quantized, "noise_stats")?;
    let (n, d) = original.shape();
    ensure!(n >= 2, Validation, "noise statistics need at least 2 samples, got {n}");
    let nf = n as f64;
    let delta = original.sub(quantized)?;

    let col_mean = |m: &Matrix| -> Vec<f64> {
        let mut acc = vec![0.0; d];
        for r in m.row_iter() {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / nf).collect()
    };
    let mean = col_mean(&delta);
    let x_mean = col_mean(original);

    let centred = |m: &Matrix, mu: &[f64]| Matrix::from_fn(n, d, |i, j| m.get(i, j) - mu[j]);
    let dc = centred(&delta, &mean);
    let xc = centred(original, &x_mean);

    let cov = dc.t_matmul(&dc)?.scale(1.0 / nf);
    let variance = cov.diagonal();
    let mut cross: f64 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            cross = cross.max(corr(cov.get(i, j), variance[i], variance[j]).abs());
        }
    }
    let mut signal: f64 = 0.0;
    for j in 0..d {
        let (mut sxd, mut sxx) = (0.0, 0.0);
        for i in 0..n {
            sxd += xc.get(i, j) * dc.get(i, j);
            sxx += xc.get(i, j) * xc.get(i, j);
        }
        signal = signal.max(corr(sxd / nf, sxx / nf, variance[j]).abs());
    }
    Ok(NoiseStats {
        mean,
        variance,
        cross_channel_corr: cross,
        signal_noise_corr: signal,
        samples: n,
    })
}
