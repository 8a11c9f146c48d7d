use sqnrkit::metrics::sqnr;
use sqnrkit::quant::{
    noise_stats, quantize_activations, quantize_activations_detailed, quantize_dequantize, quantize_weights,
};
use sqnrkit::synth::{gen_activations, gen_weight};
use sqnrkit::{
    ActivationSet, DistSpec, Family, Granularity, Matrix, QuantConfig, QuantRange, RangePolicy, Seed, SeededRng,
    Symmetry,
};

fn uniform_matrix(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(Seed(seed));
    Matrix::from_fn(n, d, |_, _| rng.uniform_in(-1.0, 1.0))
}

fn static_unit(bits: u32) -> QuantConfig {
    QuantConfig::activations(bits)
        .with_granularity(Granularity::PerTensor)
        .with_policy(RangePolicy::Static(vec![QuantRange::new(-1.0, 1.0).unwrap()]))
}

#[test]
fn noise_variance_is_step_squared_over_twelve() {
    let x = ActivationSet::new(uniform_matrix(100_000, 10, 1)).unwrap();
    let q = quantize_activations(&x, &static_unit(8)).unwrap();
    let stats = noise_stats(x.matrix(), q.matrix()).unwrap();
    let s: f64 = 2.0 / 255.0;
    let model = s * s / 12.0;
    for v in &stats.variance {
        assert!((v / model - 1.0).abs() < 0.02, "variance ratio {}", v / model);
    }
    let bound = 3.0 * s / (12.0 * stats.samples as f64).sqrt();
    assert!(stats.max_abs_mean() < bound, "mean {} vs {bound}", stats.max_abs_mean());
    assert!(stats.cross_channel_corr < 0.02);
    assert!(stats.signal_noise_corr < 0.05);
}

#[test]
fn bimodal_two_bits_correlates_noise_with_signal() {
    let mut rng = SeededRng::new(Seed(2));
    let m = Matrix::from_fn(20_000, 8, |_, _| {
        let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        s + 0.05 * rng.normal()
    });
    let x = ActivationSet::new(m).unwrap();
    let corr = |b| {
        let q = quantize_activations(&x, &QuantConfig::activations(b)).unwrap();
        noise_stats(x.matrix(), q.matrix()).unwrap().signal_noise_corr
    };
    let (c2, c8) = (corr(2), corr(8));
    assert!(c2 > 0.5 && c2 > 5.0 * c8, "b=2 {c2}, b=8 {c8}");
}

#[test]
fn mse_non_increasing_in_bits_on_gaussian_data() {
    let x = gen_activations(64, 2000, &DistSpec::new(Family::Gaussian), Seed(3)).unwrap();
    let w = gen_weight(64, 64, Family::Gaussian, Seed(4)).unwrap();
    let mut prev_x = f64::INFINITY;
    let mut prev_w = f64::INFINITY;
    for b in 2..=12 {
        let mx = x.matrix().sub(quantize_activations(&x, &QuantConfig::activations(b)).unwrap().matrix()).unwrap();
        let mw = w.sub(&quantize_weights(&w, &QuantConfig::weights(b)).unwrap()).unwrap();
        let (ex, ew) = (mx.frobenius_sq(), mw.frobenius_sq());
        assert!(ex <= prev_x && ew <= prev_w, "b={b}");
        prev_x = ex;
        prev_w = ew;
    }
}

#[test]
fn sixteen_bit_fidelity() {
    let w = gen_weight(128, 128, Family::Gaussian, Seed(5)).unwrap();
    let wq = quantize_weights(&w, &QuantConfig::weights(16)).unwrap();
    let rel = (w.sub(&wq).unwrap().frobenius_sq() / w.frobenius_sq()).sqrt();
    assert!(rel < 1e-3, "{rel}");

    let x = gen_activations(128, 1024, &DistSpec::new(Family::Gaussian), Seed(6)).unwrap();
    let xq = quantize_activations(&x, &QuantConfig::activations(16)).unwrap();
    let db = sqnr(&x.apply(&w).unwrap(), &xq.apply(&w).unwrap()).unwrap().db().unwrap().0;
    assert!(db > 80.0, "{db}");
}

#[test]
fn per_token_half_step_bound() {
    let x = gen_activations(32, 500, &DistSpec::new(Family::StudentT { nu: 3.0 }), Seed(7)).unwrap();
    for sym in [Symmetry::Symmetric, Symmetry::Asymmetric] {
        let cfg = QuantConfig::activations(3).with_symmetry(sym);
        let (q, stats) = quantize_activations_detailed(&x, &cfg).unwrap();
        assert_eq!(stats.clipped_values, 0);
        for (a, b) in x.token_iter().zip(q.token_iter()) {
            let r = sqnrkit::quant::compute_range(a, sym).unwrap();
            let half = r.step(3) / 2.0;
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() <= half * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn grid_points_are_fixed_and_two_bit_example() {
    let r = QuantRange::new(0.0, 3.0).unwrap();
    assert_eq!(quantize_dequantize(&[1.4], r, 2), vec![1.0]);
    assert_eq!(quantize_dequantize(&[0.0, 1.0, 2.0, 3.0], r, 2), vec![0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn static_ranges_clamp_and_count() {
    let x = ActivationSet::from_rows(&[vec![0.5, 2.0], vec![-3.0, 0.0], vec![0.1, 0.2]]).unwrap();
    let (q, stats) = quantize_activations_detailed(&x, &static_unit(8)).unwrap();
    assert_eq!(stats.clipped_values, 2);
    assert_eq!(stats.clipped_groups, 1);
    assert_eq!(q.token(0)[1], 1.0);
    assert_eq!(q.token(1)[0], -1.0);
    let missing = QuantConfig::activations(8).with_policy(RangePolicy::Static(vec![QuantRange::new(-1.0, 1.0).unwrap()]));
    assert_eq!(quantize_activations(&x, &missing).unwrap_err().exit_code(), 2);
}
