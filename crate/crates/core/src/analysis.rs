//! Per-layer measured and predicted SQNR.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::metrics::{
    autocorrelation, concentration, max_alignment, parallel, predicted_single, predicted_sqnr, sqnr,
    sqnr_ratio_r, Ratio,
};
use crate::quant::{
    group_ranges, noise_stats, quantize_activations_detailed, quantize_weights_detailed, Granularity,
    NoiseStats, QuantConfig, QuantRange,
};
use crate::spd::SpdMatrix;
use crate::tensor::{ActivationSet, LinearLayer, Matrix};

/// Conditions under which the predictor's assumptions may not hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Values fell outside a static or percentile range and were clamped.
    Clipping,
    /// Some groups had a zero range and passed through unquantized.
    DegenerateGroups,
    /// Fewer tokens than channels.
    RankDeficient,
    /// One token carries most of the joint error energy.
    OutlierToken,
    /// Noise correlated across channels or with the signal.
    Decorrelation,
    /// Channel scaling left some channels unscaled.
    DegenerateChannels,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Clipping => "clipping",
            Flag::DegenerateGroups => "degenerate_groups",
            Flag::RankDeficient => "rank_deficient",
            Flag::OutlierToken => "outlier_token",
            Flag::Decorrelation => "decorrelation",
            Flag::DegenerateChannels => "degenerate_channels",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Share of the total joint error a single token may carry before
/// [`Flag::OutlierToken`] is raised.
pub const OUTLIER_TOKEN_SHARE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnalysis {
    pub b_w: u32,
    pub b_x: u32,
    pub sqnr_measured_joint: Ratio,
    pub sqnr_measured_act_only: Ratio,
    pub sqnr_measured_w_only: Ratio,
    pub sqnr_predicted: Ratio,
    pub sqnr_predicted_act_only: Ratio,
    pub sqnr_predicted_w_only: Ratio,
    pub c_x: Ratio,
    pub c_w: Ratio,
    pub a: f64,
    pub a_max: f64,
    pub r: Ratio,
    pub degenerate_groups: usize,
    /// Tokens with at least one clamped value, as a fraction of all tokens.
    pub clipped_token_fraction: f64,
    /// Largest fraction of the joint error energy owned by one token.
    pub max_token_error_share: f64,
    pub flags: BTreeSet<Flag>,
}

impl LayerAnalysis {
    /// Predicted minus measured joint SQNR in dB; `None` if either is exact.
    pub fn gap_db(&self) -> Option<f64> {
        Some(self.sqnr_predicted.db()?.0 - self.sqnr_measured_joint.db()?.0)
    }

    /// Measured joint SQNR minus `parallel(act-only, w-only)` in dB.
    pub fn composition_residual_db(&self) -> Option<f64> {
        let composed = parallel(self.sqnr_measured_act_only, self.sqnr_measured_w_only).ok()?;
        Some(self.sqnr_measured_joint.db()?.0 - composed.db()?.0)
    }
}

fn clipped_tokens(x: &ActivationSet, cfg: &QuantConfig) -> Result<usize> {
    let ranges = group_ranges(x.matrix(), cfg)?;
    let range_of = |t: usize| -> QuantRange {
        match cfg.granularity {
            Granularity::PerTensor => ranges[0],
            _ => ranges[t],
        }
    };
    Ok(x
        .token_iter()
        .enumerate()
        .filter(|(t, row)| {
            let r = range_of(*t);
            !r.is_degenerate() && row.iter().any(|&v| !r.contains(v))
        })
        .count())
}

fn max_row_share(signal: &Matrix, noisy: &Matrix) -> f64 {
    let per_row: Vec<f64> = signal
        .row_iter()
        .zip(noisy.row_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect();
    let total: f64 = per_row.iter().sum();
    if total > 0.0 {
        per_row.iter().fold(0.0f64, |m, &v| m.max(v)) / total
    } else {
        0.0
    }
}

/// Quantizes `layer` and `x` with the given configurations and compares the
/// measured SQNRs with the predictor.
pub fn analyze_layer(
    layer: &LinearLayer,
    x: &ActivationSet,
    cfg_w: &QuantConfig,
    cfg_a: &QuantConfig,
) -> Result<LayerAnalysis> {
    layer.check_input(x)?;
    let w = layer.weight();
    let (w_q, w_stats) = quantize_weights_detailed(w, cfg_w)?;
    let (x_q, x_stats) = quantize_activations_detailed(x, cfg_a)?;

    let y = x.apply(w)?;
    let y_joint = x_q.apply(&w_q)?;
    let joint = sqnr(&y, &y_joint)?;
    let act_only = sqnr(&y, &x_q.apply(w)?)?;
    let w_only = sqnr(&y, &x.apply(&w_q)?)?;

    let c_x = concentration(x.matrix(), cfg_a)?;
    let c_w = concentration(w, cfg_w)?;
    let tw = w.frobenius_sq();
    let tx = x.mean_sq_norm();
    ensure!(tx > 0.0, UndefinedMetric, "layer {}: activations are all zero", layer.name());
    let a = y.frobenius_sq() / x.tokens() as f64 / (tw * tx);
    let sigma = SpdMatrix::new(autocorrelation(x)?.matrix())?;
    let a_max = max_alignment(w, &sigma)?;
    ensure!(
        a > 0.0,
        UndefinedMetric,
        "layer {}: output has zero energy, alignment undefined",
        layer.name()
    );

    let mut flags = BTreeSet::new();
    let clipped = clipped_tokens(x, cfg_a)?;
    if clipped > 0 || w_stats.clipped_values > 0 || cfg_a.clips_by_design() || cfg_w.clips_by_design() {
        flags.insert(Flag::Clipping);
    }
    let degenerate_groups = w_stats.degenerate_groups + x_stats.degenerate_groups;
    if degenerate_groups > 0 {
        flags.insert(Flag::DegenerateGroups);
    }
    if x.tokens() < x.channels() {
        flags.insert(Flag::RankDeficient);
    }
    let share = max_row_share(&y, &y_joint);
    if x.tokens() > 1 && share > OUTLIER_TOKEN_SHARE {
        flags.insert(Flag::OutlierToken);
    }

    Ok(LayerAnalysis {
        b_w: cfg_w.bits,
        b_x: cfg_a.bits,
        sqnr_measured_joint: joint,
        sqnr_measured_act_only: act_only,
        sqnr_measured_w_only: w_only,
        sqnr_predicted: predicted_sqnr(cfg_a.bits, cfg_w.bits, c_x, c_w, a)?,
        sqnr_predicted_act_only: predicted_single(cfg_a.bits, c_x, a),
        sqnr_predicted_w_only: predicted_single(cfg_w.bits, c_w, a),
        c_x,
        c_w,
        a,
        a_max,
        r: sqnr_ratio_r(cfg_a.bits, cfg_w.bits, c_x, c_w),
        degenerate_groups,
        clipped_token_fraction: clipped as f64 / x.tokens() as f64,
        max_token_error_share: share,
        flags,
    })
}

/// Cross-channel noise correlation tolerated before [`Flag::Decorrelation`].
pub const CROSS_CORR_LIMIT: f64 = 0.02;
/// Signal-noise correlation tolerated before [`Flag::Decorrelation`].
pub const SIGNAL_CORR_LIMIT: f64 = 0.05;

/// Sampling-noise floor for the largest of many sample correlations.
pub fn correlation_limit(base: f64, samples: usize) -> f64 {
    base.max(6.0 / (samples as f64).sqrt())
}

/// Noise-model diagnostics for one side of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub stats: NoiseStats,
    /// Mean squared noise over the mean of `s²/12` across quantized groups.
    pub variance_ratio: f64,
    pub decorrelated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerValidation {
    pub analysis: LayerAnalysis,
    pub activation_noise: Option<NoiseReport>,
    pub weight_noise: Option<NoiseReport>,
}

fn noise_report(orig: &Matrix, quant: &Matrix, ranges: &[QuantRange], bits: u32) -> Result<Option<NoiseReport>> {
    if orig.rows() < 2 {
        return Ok(None);
    }
    let stats = noise_stats(orig, quant)?;
    let per_row = |i: usize| if ranges.len() == 1 { ranges[0] } else { ranges[i] };
    let (mut noise, mut model, mut count) = (0.0, 0.0, 0usize);
    for (i, (a, b)) in orig.row_iter().zip(quant.row_iter()).enumerate() {
        let r = per_row(i);
        if r.is_degenerate() {
            continue;
        }
        noise += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        model += r.step(bits).powi(2) / 12.0 * a.len() as f64;
        count += 1;
    }
    let variance_ratio = if count > 0 && model > 0.0 { noise / model } else { f64::NAN };
    let decorrelated = stats.cross_channel_corr.abs() < correlation_limit(CROSS_CORR_LIMIT, stats.samples)
        && stats.signal_noise_corr.abs() < correlation_limit(SIGNAL_CORR_LIMIT, stats.samples);
    Ok(Some(NoiseReport {
        stats,
        variance_ratio,
        decorrelated,
    }))
}

/// [`analyze_layer`] plus the noise-model checks behind the predictor.
pub fn validate_layer(
    layer: &LinearLayer,
    x: &ActivationSet,
    cfg_w: &QuantConfig,
    cfg_a: &QuantConfig,
) -> Result<LayerValidation> {
    let mut analysis = analyze_layer(layer, x, cfg_w, cfg_a)?;
    let x_q = crate::quant::quantize_activations(x, cfg_a)?;
    let w_q = crate::quant::quantize_weights(layer.weight(), cfg_w)?;
    let activation_noise = noise_report(x.matrix(), x_q.matrix(), &group_ranges(x.matrix(), cfg_a)?, cfg_a.bits)?;
    let weight_noise = noise_report(layer.weight(), &w_q, &group_ranges(layer.weight(), cfg_w)?, cfg_w.bits)?;
    if [&activation_noise, &weight_noise]
        .iter()
        .any(|n| n.as_ref().is_some_and(|n| !n.decorrelated))
    {
        analysis.flags.insert(Flag::Decorrelation);
    }
    Ok(LayerValidation {
        analysis,
        activation_noise,
        weight_noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Symmetry;
    use crate::rng::Seed;
    use crate::synth::{gen_activations, gen_layer, DistSpec, Family};

    #[test]
    fn identity_layer_high_bits() {
        let d = 64;
        let layer = LinearLayer::new("id", Matrix::identity(d), None).unwrap();
        let x = gen_activations(d, 2048, &DistSpec::new(Family::Gaussian), Seed(3)).unwrap();
        // one-hot rows are exact on an asymmetric grid while the predictor
        // still charges s²/12 per weight, so the weight side is kept far away
        let cfg_w = QuantConfig::weights(16).with_symmetry(Symmetry::Asymmetric);
        let la = analyze_layer(&layer, &x, &cfg_w, &QuantConfig::activations(12)).unwrap();
        assert_eq!(la.sqnr_measured_w_only, Ratio::Exact);
        assert!(la.sqnr_measured_joint.db().unwrap().0 > 60.0);
        assert!(la.sqnr_predicted.db().unwrap().0 > 60.0);
        assert!(la.gap_db().unwrap().abs() < 1.0, "{la:?}");
        assert!(la.a <= la.a_max * (1.0 + 1e-9) && la.a_max <= 1.0 + 1e-12);
    }

    #[test]
    fn symmetric_identity_weights_sit_on_midpoints() {
        // every zero takes a deterministic s/2 error: s²/4 instead of s²/12
        let d = 64;
        let layer = LinearLayer::new("id", Matrix::identity(d), None).unwrap();
        let x = gen_activations(d, 2048, &DistSpec::new(Family::Gaussian), Seed(3)).unwrap();
        let la = analyze_layer(&layer, &x, &QuantConfig::weights(10), &QuantConfig::activations(16)).unwrap();
        let gap = la.sqnr_predicted_w_only.db().unwrap().0 - la.sqnr_measured_w_only.db().unwrap().0;
        let want = 10.0 * (3.0 * 63.0 / 64.0f64).log10();
        assert!((gap - want).abs() < 0.1, "{gap} vs {want}");
    }

    #[test]
    fn predictor_is_parallel_of_single_sides() {
        let x = gen_activations(32, 512, &DistSpec::new(Family::Laplace), Seed(5)).unwrap();
        let layer = gen_layer("l", 16, 32, Family::Gaussian, Seed(6)).unwrap();
        let la = analyze_layer(&layer, &x, &QuantConfig::weights(4), &QuantConfig::activations(6)).unwrap();
        let p = parallel(la.sqnr_predicted_act_only, la.sqnr_predicted_w_only).unwrap();
        assert_eq!(p.value().unwrap(), la.sqnr_predicted.value().unwrap());
        assert!(la.flags.is_empty(), "{:?}", la.flags);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = gen_activations(8, 16, &DistSpec::new(Family::Gaussian), Seed(1)).unwrap();
        let layer = LinearLayer::new("l", Matrix::identity(4), None).unwrap();
        let err = analyze_layer(&layer, &x, &QuantConfig::weights(4), &QuantConfig::activations(4)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn bimodal_two_bit_noise_is_correlated() {
        let mut rng = crate::rng::SeededRng::new(Seed(11));
        let rows: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                (0..16)
                    .map(|_| {
                        let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                        s + 0.05 * rng.normal()
                    })
                    .collect()
            })
            .collect();
        let x = ActivationSet::from_rows(&rows).unwrap();
        let layer = gen_layer("l", 16, 16, Family::Gaussian, Seed(12)).unwrap();
        let v = validate_layer(&layer, &x, &QuantConfig::weights(8), &QuantConfig::activations(2)).unwrap();
        assert!(v.analysis.flags.contains(&Flag::Decorrelation));
    }
}
