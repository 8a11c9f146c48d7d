use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sqnrkit::synth::{gen_activations, gen_weight};
use sqnrkit::{save_bundle, DistSpec, Family, Matrix, Seed, SeededRng, TensorBundle, TensorKind};
use tempfile::TempDir;

fn sqnrkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqnrkit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sqnrkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = sqnrkit(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_bundle(dir: &Path, name: &str, tensors: &[(&str, TensorKind, Matrix)]) -> PathBuf {
    let mut b = TensorBundle::new();
    for (n, k, m) in tensors {
        b.push_matrix(*n, *k, m).unwrap();
    }
    let p = dir.join(name);
    save_bundle(&b, &p).unwrap();
    p
}

fn gaussian_bundle(dir: &Path) -> PathBuf {
    let x = gen_activations(64, 2048, &DistSpec::new(Family::Gaussian), Seed(1)).unwrap();
    let w = gen_weight(64, 64, Family::Gaussian, Seed(2)).unwrap();
    write_bundle(
        dir,
        "gauss",
        &[("g", TensorKind::Activations, x.matrix().clone()), ("g/w", TensorKind::Weight, w)],
    )
}

fn rows(json: &str) -> Vec<Value> {
    let v: Value = serde_json::from_str(json).unwrap();
    v["rows"].as_array().unwrap().clone()
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

#[test]
fn invalid_family_is_a_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"seed": 1, "tokens": 16, "groups": [{"name": "g", "channels": 4,
            "activations": {"family": "cauchy"}, "layers": [{"name": "w", "d_out": 2}]}]}"#,
    )
    .unwrap();
    let err = fails(&["synth", s(&spec), "--out", s(&dir.path().join("b"))], 2);
    assert!(err.contains("family") && err.contains("cauchy"), "{err}");
}

#[test]
fn dimension_mismatch_names_both_tensors() {
    let dir = TempDir::new().unwrap();
    let p = write_bundle(
        dir.path(),
        "bad",
        &[
            ("acts", TensorKind::Activations, Matrix::zeros(8, 6)),
            ("acts/proj", TensorKind::Weight, Matrix::zeros(4, 5)),
        ],
    );
    let err = fails(&["analyze", s(&p)], 3);
    assert!(err.contains("acts/proj") && err.contains("activations acts"), "{err}");
}

#[test]
fn bad_grids_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let p = gaussian_bundle(dir.path());
    let spec = dir.path().join("sweep.json");
    std::fs::write(&spec, r#"{"bundles": ["gauss"], "bit_pairs": [[4, 4]], "transforms": []}"#).unwrap();
    fails(&["sweep", s(&spec)], 2);
    std::fs::write(&spec, r#"{"bundles": ["gauss"], "bit_pairs": [[4, 4]], "transforms": ["none"], "bits": 3}"#)
        .unwrap();
    assert!(fails(&["sweep", s(&spec)], 2).contains("bits"));
    fails(&["analyze", s(&p), "--format", "both"], 2);
    fails(&["analyze", s(&p), "--transform", "cat:0"], 2);
    fails(&["analyze", s(&p), "--bits-w", "1"], 2);
    fails(&["analyze", s(&dir.path().join("missing"))], 3);
}

#[test]
fn sixteen_bits_are_nearly_lossless() {
    let dir = TempDir::new().unwrap();
    let p = gaussian_bundle(dir.path());
    let out = ok(&["analyze", s(&p), "--bits-w", "16", "--bits-a", "16", "--format", "json"]);
    let r = &rows(&out)[0];
    assert!(num(&r["sqnr_measured_db"]) > 80.0);
}

#[test]
fn hadamard_keeps_alignment_and_moves_concentration() {
    let dir = TempDir::new().unwrap();
    let b = dir.path().join("b");
    ok(&["synth", s(&fixture("synth.json")), "--out", s(&b)]);
    let out = ok(&["analyze", s(&b), "--transform", "none", "--transform", "hadamard", "--format", "json"]);
    let rows = rows(&out);
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(2) {
        let (none, had) = (&pair[0], &pair[1]);
        assert_eq!(none["transform"], "none");
        assert_eq!(had["transform"], "hadamard");
        let (a0, a1) = (num(&none["A"]), num(&had["A"]));
        assert!((a0 - a1).abs() < 1e-9 * a0, "{a0} vs {a1}");
        assert!((num(&none["C_x_db"]) - num(&had["C_x_db"])).abs() > 0.1);
    }
}

#[test]
fn sweep_has_one_row_per_layer_transform_and_bit_pair() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", s(&fixture("synth.json")), "--out", s(&dir.path().join("bundle"))]);
    let spec = dir.path().join("sweep.json");
    std::fs::copy(fixture("sweep.json"), &spec).unwrap();
    let out = ok(&["sweep", s(&spec), "--format", "json"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3 * 3 * 4);
    for layer in ["attn/q", "attn/k", "mlp/up"] {
        for t in ["none", "hadamard", "cat:32+h"] {
            let n = rows.iter().filter(|r| r["layer"] == layer && r["transform"] == t).count();
            assert_eq!(n, 4, "{layer} {t}");
        }
    }

    // when activations dominate, widening x moves the joint SQNR more than widening W
    for layer in ["attn/q", "attn/k", "mlp/up"] {
        let get = |bw: u64, bx: u64| {
            rows.iter()
                .find(|r| r["layer"] == layer && r["transform"] == "none" && r["b_w"] == bw && r["b_x"] == bx)
                .unwrap()
        };
        let base = get(4, 4);
        if num(&base["r_db"]) < 0.0 {
            let dx = num(&get(4, 8)["sqnr_measured_db"]) - num(&base["sqnr_measured_db"]);
            let dw = num(&get(8, 4)["sqnr_measured_db"]) - num(&base["sqnr_measured_db"]);
            assert!(dx > dw, "{layer}: x {dx} w {dw}");
        }
    }
    assert!(!v["shift_checks"].as_array().unwrap().is_empty());

    let csv = ok(&["sweep", s(&spec)]);
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 17);
    assert_eq!(csv.lines().count(), 1 + 36);
}

#[test]
fn validate_gaussian_eight_bits_is_clean() {
    let dir = TempDir::new().unwrap();
    let p = gaussian_bundle(dir.path());
    let out = ok(&["validate", s(&p), "--bits-w", "8", "--bits-a", "8", "--format", "json"]);
    let r = &rows(&out)[0];
    assert_eq!(r["flags"], "");
    assert!(num(&r["gap_db"]).abs() < 1.0, "{}", r["gap_db"]);
    assert_eq!(r["activation_noise"]["decorrelated"], true);
    assert_eq!(r["weight_noise"]["decorrelated"], true);
}

#[test]
fn validate_bimodal_two_bits_flags_decorrelation() {
    let dir = TempDir::new().unwrap();
    let mut rng = SeededRng::new(Seed(3));
    let x = Matrix::from_fn(4096, 32, |_, _| {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        sign + 0.05 * rng.normal()
    });
    let w = gen_weight(32, 32, Family::Gaussian, Seed(4)).unwrap();
    let p = write_bundle(
        dir.path(),
        "bimodal",
        &[("g", TensorKind::Activations, x), ("g/w", TensorKind::Weight, w)],
    );
    let out = ok(&["validate", s(&p), "--bits-w", "2", "--bits-a", "2", "--format", "json"]);
    let r = &rows(&out)[0];
    assert!(r["flags"].as_str().unwrap().contains("decorrelation"), "{}", r["flags"]);
}

#[test]
fn narrow_static_ranges_raise_clipping_and_widen_the_gap() {
    let dir = TempDir::new().unwrap();
    let p = gaussian_bundle(dir.path());
    let calibrated = dir.path().join("ranges");
    ok(&["calibrate", s(&p), "--out", s(&calibrated)]);
    let wide = ok(&["analyze", s(&p), "--bits-a", "8", "--bits-w", "8", "--static-a", s(&calibrated), "--format", "json"]);
    let wide = &rows(&wide)[0];
    assert_eq!(num(&wide["clipped_token_fraction"]), 0.0);

    // a per-token chance of about 5% that one of 64 channels exceeds 3.36σ
    let narrow = write_bundle(
        dir.path(),
        "narrow",
        &[("g", TensorKind::Matrix, Matrix::new(1, 2, vec![-3.36, 3.36]).unwrap())],
    );
    let out = ok(&["analyze", s(&p), "--bits-a", "8", "--bits-w", "8", "--static-a", s(&narrow), "--format", "json"]);
    let r = &rows(&out)[0];
    let frac = num(&r["clipped_token_fraction"]);
    assert!((0.02..0.1).contains(&frac), "{frac}");
    assert!(r["flags"].as_str().unwrap().contains("clipping"));
    assert!(num(&r["gap_db"]) > num(&wide["gap_db"]));
}

#[test]
fn synth_is_deterministic_and_seed_overrides() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", s(&fixture("synth.json")), "--out", s(&a)]);
    ok(&["synth", s(&fixture("synth.json")), "--out", s(&b)]);
    ok(&["synth", s(&fixture("synth.json")), "--out", s(&c), "--seed", "8"]);
    let read = |p: &Path| sqnrkit::load_bundle(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn transform_export_reconstructs_outputs() {
    let dir = TempDir::new().unwrap();
    let b = dir.path().join("b");
    let t = dir.path().join("t");
    ok(&["synth", s(&fixture("synth.json")), "--out", s(&b)]);
    ok(&["transform", s(&b), "--transform", "cat:16+h", "--out", s(&t)]);
    let (orig, tr) = (sqnrkit::load_bundle(&b).unwrap(), sqnrkit::load_bundle(&t).unwrap());
    for (layer, group) in orig.layer_pairs().unwrap() {
        let y = orig.activations(&group).unwrap().apply(layer.weight()).unwrap();
        let w2 = tr.get(layer.name()).unwrap().to_matrix().unwrap();
        let y2 = tr.activations(&group).unwrap().apply(&w2).unwrap();
        assert!(y.max_abs_diff(&y2).unwrap() < 1e-8 * y.max_abs(), "{}", layer.name());
        let tm = tr.get(&format!("T:{group}")).unwrap().to_matrix().unwrap();
        let ti = tr.get(&format!("T_inv:{group}")).unwrap().to_matrix().unwrap();
        let d = tm.rows();
        assert!(tm.matmul(&ti).unwrap().max_abs_diff(&Matrix::identity(d)).unwrap() < 1e-8);
    }
}
