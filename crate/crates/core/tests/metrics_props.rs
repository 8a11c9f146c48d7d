use proptest::prelude::*;
use sqnrkit::analysis::analyze_layer;
use sqnrkit::metrics::{
    alignment, alignment_from_samples, autocorrelation, concentration_activations, concentration_weights,
    max_alignment, predicted_sqnr, reference_concentration, Ratio,
};
use sqnrkit::synth::{gen_activations, gen_layer, gen_weight, random_orthogonal};
use sqnrkit::{ActivationSet, Covariance, DistSpec, Family, Matrix, QuantConfig, Seed, SeededRng, SpdMatrix, Symmetry};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(Seed(seed));
    Matrix::from_fn(r, c, |_, _| rng.laplace())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scale_invariance(seed in 0u64..10_000, alpha in 1e-3f64..1e3, beta in 1e-3f64..1e3, neg in any::<bool>()) {
        let alpha = if neg { -alpha } else { alpha };
        let x = ActivationSet::new(random_matrix(40, 12, seed)).unwrap();
        let w = random_matrix(6, 12, seed + 1);
        let xs = ActivationSet::new(x.matrix().scale(alpha)).unwrap();
        let ws = w.scale(beta);
        for sym in [Symmetry::Symmetric, Symmetry::Asymmetric] {
            let c = concentration_activations(&x, sym).unwrap().value().unwrap();
            let cs = concentration_activations(&xs, sym).unwrap().value().unwrap();
            prop_assert!(rel(cs, c) < 1e-10);
            let cw = concentration_weights(&w, sym).unwrap().value().unwrap();
            let cws = concentration_weights(&ws, sym).unwrap().value().unwrap();
            prop_assert!(rel(cws, cw) < 1e-10);
        }
        let a = alignment_from_samples(&w, &x).unwrap();
        prop_assert!(rel(alignment_from_samples(&ws, &xs).unwrap(), a) < 1e-10);
    }

    #[test]
    fn bounds_and_trace_identity(seed in 0u64..10_000, d_out in 1usize..10, d_in in 1usize..10) {
        let x = ActivationSet::new(random_matrix(30, d_in, seed)).unwrap();
        let w = random_matrix(d_out, d_in, seed + 7);
        let a_samples = alignment_from_samples(&w, &x).unwrap();
        let sigma = autocorrelation(&x).unwrap();
        let a_trace = alignment(&w, &sigma).unwrap();
        prop_assert!(rel(a_trace, a_samples) < 1e-10);
        let a_max = max_alignment(&w, &SpdMatrix::new(sigma.matrix()).unwrap()).unwrap();
        prop_assert!(a_samples > 0.0);
        prop_assert!(a_samples <= a_max * (1.0 + 1e-9));
        prop_assert!(a_max <= 1.0 + 1e-12);
        prop_assert!(a_max >= 1.0 / d_out as f64 * (1.0 - 1e-12));
        let c = concentration_activations(&x, Symmetry::Symmetric).unwrap().value().unwrap();
        prop_assert!(c >= 0.25);
        let cw = concentration_weights(&w, Symmetry::Symmetric).unwrap().value().unwrap();
        prop_assert!(cw >= 0.25);
    }

    #[test]
    fn predictor_is_harmonic_composition(cx in 0.01f64..100.0, cw in 0.01f64..100.0, a in 1e-4f64..1.0, bx in 2u32..16, bw in 2u32..16) {
        let joint = predicted_sqnr(bx, bw, Ratio::Finite(cx), Ratio::Finite(cw), a).unwrap().value().unwrap();
        let sx = sqnrkit::metrics::predicted_single(bx, Ratio::Finite(cx), a).value().unwrap();
        let sw = sqnrkit::metrics::predicted_single(bw, Ratio::Finite(cw), a).value().unwrap();
        prop_assert!(rel(joint, 1.0 / (1.0 / sx + 1.0 / sw)) < 1e-14);
        prop_assert!(joint <= sx.min(sw));
    }
}

#[test]
fn rotation_invariance_of_alignment() {
    let mut rng = SeededRng::new(Seed(99));
    for d in [8, 64, 256] {
        let x = gen_activations(
            d,
            2 * d,
            &DistSpec::new(Family::Laplace).with_covariance(Covariance::RandomSpd { condition_number: 100.0 }),
            Seed(d as u64),
        )
        .unwrap();
        let w = gen_weight(d / 2, d, Family::Gaussian, Seed(d as u64 + 1)).unwrap();
        let a = alignment_from_samples(&w, &x).unwrap();
        for _ in 0..5 {
            let r = random_orthogonal(d, &mut rng);
            let xr = ActivationSet::new(x.matrix().matmul_t(&r).unwrap()).unwrap();
            let wr = w.matmul_t(&r).unwrap();
            assert!(rel(alignment_from_samples(&wr, &xr).unwrap(), a) <= 1e-9);
        }
    }
}

#[test]
fn gaussian_tokens_match_reference() {
    let d = 4096;
    let x = gen_activations(d, 1000, &DistSpec::new(Family::Gaussian), Seed(1)).unwrap();
    for sym in [Symmetry::Asymmetric, Symmetry::Symmetric] {
        let c = concentration_activations(&x, sym).unwrap().value().unwrap();
        let r = reference_concentration(Family::Gaussian, d, sym, 1000, Seed(2)).unwrap();
        let gap = 10.0 * (c / r.value).log10();
        assert!(gap.abs() < 0.2, "{sym:?}: {gap} dB");
    }
}

#[test]
fn reference_orderings() {
    let r = |f, d| reference_concentration(f, d, Symmetry::Symmetric, 4000, Seed(3)).unwrap();
    let lap = r(Family::Laplace, 1024);
    let gau = r(Family::Gaussian, 1024);
    assert!(lap.value + 3.0 * lap.std_error < gau.value - 3.0 * gau.std_error);
    // per-dimension concentration falls as the range grows like √(2 ln d)
    let per_dim: Vec<f64> = [16, 64, 256, 1024].iter().map(|&d| r(Family::Gaussian, d).value / d as f64).collect();
    assert!(per_dim.windows(2).all(|w| w[1] < w[0]), "{per_dim:?}");
}

fn gaussian_layer(d: usize, seed: u64) -> (sqnrkit::LinearLayer, ActivationSet) {
    let x = gen_activations(
        d,
        4 * d,
        &DistSpec::new(Family::Gaussian).with_covariance(Covariance::RandomSpd { condition_number: 30.0 }),
        Seed(seed),
    )
    .unwrap();
    (gen_layer("l", d, d, Family::Gaussian, Seed(seed + 1000)).unwrap(), x)
}

#[test]
fn measured_joint_is_parallel_of_sides() {
    for seed in 0..6 {
        let (layer, x) = gaussian_layer(64, seed);
        for b in [4, 6, 8] {
            let la = analyze_layer(&layer, &x, &QuantConfig::weights(b), &QuantConfig::activations(b)).unwrap();
            let res = la.composition_residual_db().unwrap();
            assert!(res.abs() < 1.0, "seed {seed} b {b}: {res}");
        }
    }
}

#[test]
fn measured_side_ratio_matches_r() {
    for seed in 0..4 {
        let (layer, x) = gaussian_layer(128, 50 + seed);
        for (bw, bx) in [(4, 4), (4, 6), (6, 4), (8, 8)] {
            let la = analyze_layer(&layer, &x, &QuantConfig::weights(bw), &QuantConfig::activations(bx)).unwrap();
            let measured = la.sqnr_measured_act_only.db().unwrap().0 - la.sqnr_measured_w_only.db().unwrap().0;
            let r = la.r.db().unwrap().0;
            assert!((measured - r).abs() < 1.0, "W{bw}A{bx}: {measured} vs {r}");
        }
    }
}

#[test]
fn heavy_tailed_activations_dominate_at_w4a4() {
    let d = 128;
    let spec = DistSpec::new(Family::StudentT { nu: 3.0 }).with_outlier(5, 30.0).with_outlier(77, 20.0);
    let x = gen_activations(d, 1024, &spec, Seed(4)).unwrap();
    let layer = gen_layer("l", d, d, Family::Gaussian, Seed(5)).unwrap();
    let la = analyze_layer(&layer, &x, &QuantConfig::weights(4), &QuantConfig::activations(4)).unwrap();
    assert!(la.r.db().unwrap().0 < -6.0, "{:?}", la.r);
    assert!(la.sqnr_measured_act_only.value().unwrap() < la.sqnr_measured_w_only.value().unwrap());
}

#[test]
fn sixteen_bits_exceed_eighty_db() {
    let (layer, x) = gaussian_layer(64, 77);
    let la = analyze_layer(&layer, &x, &QuantConfig::weights(16), &QuantConfig::activations(16)).unwrap();
    assert!(la.sqnr_measured_joint.db().unwrap().0 > 80.0);
}
