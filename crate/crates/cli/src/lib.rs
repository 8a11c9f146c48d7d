//! Command-line front-end: synthesis, calibration, transforms, analysis
//! sweeps and reports.

pub mod pipeline;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};
use sqnrkit::bundle::{load_bundle, save_bundle};
use sqnrkit::quant::calibrate_static_range;
use sqnrkit::transforms::{group_layers, transform_layers};
use sqnrkit::{
    Error, Matrix, QuantRange, Result, Symmetry, SynthSpec, TensorBundle, TensorKind, TransformKind,
    TransformSpec,
};

use pipeline::{layer_groups, run_bundle, GridConfig, QuantSettings};
use report::{Metadata, Report};

#[derive(Debug, Parser)]
#[command(name = "sqnrkit", version, about = "Quantization SQNR analysis for linear layers")]
pub struct Cli {
    /// Seed for synthesis and for `ortho` transforms given without one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (bundles, report.csv, report.json).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Σx regularization ε used wherever Σx⁻¹ is formed.
    #[arg(long, global = true, default_value_t = sqnrkit::metrics::DEFAULT_EPS)]
    pub eps: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bundle from a JSON spec.
    Synth { spec: PathBuf },
    /// Analyze every layer of a bundle at one bit-width pair.
    Analyze {
        bundle: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
        /// none, scale:<alpha>, hadamard, ortho[:<seed>], opt, cat:<k>[+h], diag-printed.
        /// Repeat for several.
        #[arg(long = "transform", default_value = "none")]
        transforms: Vec<String>,
    },
    /// Run a grid of bit pairs and transforms from a JSON sweep spec.
    Sweep { spec: PathBuf },
    /// Analyze plus noise-model and assumption checks.
    Validate {
        bundle: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Calibrate one transform per activation group and export the
    /// transformed bundle with `T:<group>` and `T_inv:<group>` matrices.
    Transform {
        bundle: PathBuf,
        #[arg(long)]
        transform: String,
    },
    /// Write static activation ranges (max over calibration tokens).
    Calibrate {
        bundle: PathBuf,
        #[arg(long, conflicts_with = "asym_a")]
        sym_a: bool,
        #[arg(long)]
        asym_a: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct QuantArgs {
    #[arg(long, default_value_t = 4)]
    pub bits_w: u32,
    #[arg(long, default_value_t = 4)]
    pub bits_a: u32,
    /// Symmetric weight ranges (default).
    #[arg(long, conflicts_with = "asym_w")]
    pub sym_w: bool,
    #[arg(long)]
    pub asym_w: bool,
    #[arg(long, conflicts_with = "asym_a")]
    pub sym_a: bool,
    /// Asymmetric activation ranges (default).
    #[arg(long)]
    pub asym_a: bool,
    /// Bundle of static activation ranges written by `calibrate`.
    #[arg(long)]
    pub static_a: Option<PathBuf>,
}

fn symmetry(sym: bool, asym: bool, default: Symmetry) -> Symmetry {
    match (sym, asym) {
        (true, _) => Symmetry::Symmetric,
        (_, true) => Symmetry::Asymmetric,
        _ => default,
    }
}

fn symmetry_name(s: Symmetry) -> &'static str {
    match s {
        Symmetry::Symmetric => "symmetric",
        Symmetry::Asymmetric => "asymmetric",
    }
}

impl QuantArgs {
    fn settings(&self) -> Result<QuantSettings> {
        let static_a = match &self.static_a {
            Some(p) => Some(load_ranges(p)?),
            None => None,
        };
        Ok(QuantSettings {
            sym_w: symmetry(self.sym_w, self.asym_w, Symmetry::Symmetric),
            sym_a: symmetry(self.sym_a, self.asym_a, Symmetry::Asymmetric),
            static_a,
        })
    }
}

fn load_ranges(path: &Path) -> Result<BTreeMap<String, Vec<QuantRange>>> {
    let b = load_bundle(path)?;
    let mut out = BTreeMap::new();
    for t in b.tensors().iter().filter(|t| t.kind == TensorKind::Matrix) {
        let m = t.to_matrix()?;
        if m.cols() != 2 {
            return Err(Error::Config(format!(
                "static range tensor {} must have shape [k, 2], got {:?}",
                t.name, t.shape
            )));
        }
        let ranges = m
            .row_iter()
            .map(|r| QuantRange::new(r[0], r[1]).map_err(|e| Error::Config(format!("{}: {e}", t.name))))
            .collect::<Result<Vec<_>>>()?;
        out.insert(t.name.clone(), ranges);
    }
    Ok(out)
}

/// Parses a transform list, filling `ortho` without a seed from `seed`.
pub fn parse_transforms(items: &[String], seed: u64) -> Result<Vec<TransformKind>> {
    items
        .iter()
        .map(|s| {
            if s == "ortho" {
                Ok(TransformKind::RandomOrthogonal { seed })
            } else {
                s.parse()
            }
        })
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Config(format!("{}: field `{field}`: {}", path.display(), e.into_inner()))
    })
}

fn bundle_summary(b: &TensorBundle) -> Value {
    Value::Array(
        b.tensors()
            .iter()
            .map(|t| json!({"name": t.name, "shape": t.shape}))
            .collect(),
    )
}

fn emit(cli: &Cli, report: &Report, stdout: &mut dyn Write) -> Result<()> {
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if matches!(cli.format, Format::Csv | Format::Both) {
                let p = dir.join("report.csv");
                fs::write(&p, report.csv_string()?).map_err(|e| Error::io(&p, e))?;
            }
            if matches!(cli.format, Format::Json | Format::Both) {
                let p = dir.join("report.json");
                fs::write(&p, report.json_string()).map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        }
        None => {
            let text = match cli.format {
                Format::Csv => report.csv_string()?,
                Format::Json => report.json_string(),
                Format::Both => return Err(Error::Config("--format both needs --out".into())),
            };
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out <dir>".into()))
}

/// Inputs of a `sweep`. Bundle paths are relative to the spec file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub bundles: Vec<PathBuf>,
    /// Synthetic layers regenerated once per entry of `seeds`.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// `[b_w, b_x]` pairs.
    pub bit_pairs: Vec<[u32; 2]>,
    pub transforms: Vec<String>,
    #[serde(default = "sym")]
    pub weights: Symmetry,
    #[serde(default = "asym")]
    pub activations: Symmetry,
}

fn sym() -> Symmetry {
    Symmetry::Symmetric
}

fn asym() -> Symmetry {
    Symmetry::Asymmetric
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth { spec } => {
            let mut s: SynthSpec = read_json(spec)?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let out = require_out(cli)?;
            let bundle = s.generate()?;
            save_bundle(&bundle, out)?;
            log::info!("wrote {} tensors to {}", bundle.len(), out.display());
            Ok(())
        }
        Command::Analyze {
            bundle,
            quant,
            transforms,
        } => {
            let b = load_bundle(bundle)?;
            let grid = GridConfig {
                quant: quant.settings()?,
                transforms: parse_transforms(transforms, seed)?,
                bit_pairs: vec![(quant.bits_w, quant.bits_a)],
                eps: cli.eps,
                validate: false,
            };
            let rows = run_bundle(&b, None, &grid)?;
            let meta = Metadata::new("analyze", vec![seed], &grid_json(&grid, &[bundle_summary(&b)]));
            emit(cli, &Report::new(rows, meta)?, stdout)
        }
        Command::Validate { bundle, quant } => {
            let b = load_bundle(bundle)?;
            let grid = GridConfig {
                quant: quant.settings()?,
                transforms: vec![TransformKind::Identity],
                bit_pairs: vec![(quant.bits_w, quant.bits_a)],
                eps: cli.eps,
                validate: true,
            };
            let rows = run_bundle(&b, None, &grid)?;
            for r in &rows {
                let a = &r.analysis;
                log::info!(
                    "{}: gap {:?} dB, composition residual {:?} dB, flags [{}]",
                    r.layer,
                    a.gap_db(),
                    a.composition_residual_db(),
                    a.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(",")
                );
            }
            let meta = Metadata::new("validate", vec![seed], &grid_json(&grid, &[bundle_summary(&b)]));
            emit(cli, &Report::new(rows, meta)?, stdout)
        }
        Command::Sweep { spec } => {
            let s: SweepSpec = read_json(spec)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            run_sweep(cli, &s, base, stdout)
        }
        Command::Transform { bundle, transform } => {
            let out = require_out(cli)?;
            let b = load_bundle(bundle)?;
            let kind = parse_transforms(std::slice::from_ref(transform), seed)?[0];
            let mut result = TensorBundle::new();
            for (group, x, layers) in layer_groups(&b)? {
                let refs: Vec<_> = layers.iter().collect();
                let stacked = group_layers(&refs)?;
                let t = TransformSpec::new(kind).with_eps(cli.eps).calibrate(stacked.weight(), &x)?;
                let (layers_t, x_t) = transform_layers(&layers, &x, &t)?;
                result.push_matrix(&group, TensorKind::Activations, x_t.matrix())?;
                for l in &layers_t {
                    result.push_matrix(l.name(), TensorKind::Weight, l.weight())?;
                }
                result.push_matrix(format!("T:{group}"), TensorKind::Matrix, &t.t())?;
                result.push_matrix(format!("T_inv:{group}"), TensorKind::Matrix, &t.t_inv())?;
                log::info!("{group}: {kind} residual {:e}", t.residual());
            }
            save_bundle(&result, out)
        }
        Command::Calibrate { bundle, sym_a, asym_a } => {
            let out = require_out(cli)?;
            let b = load_bundle(bundle)?;
            let sym = symmetry(*sym_a, *asym_a, Symmetry::Asymmetric);
            let mut result = TensorBundle::new();
            for name in b.names_of(TensorKind::Activations) {
                let r = calibrate_static_range(&b.activations(name)?, sym)?;
                result.push_matrix(name, TensorKind::Matrix, &Matrix::new(1, 2, vec![r.lo, r.hi])?)?;
            }
            save_bundle(&result, out)
        }
    }
}

fn grid_json(grid: &GridConfig, bundles: &[Value]) -> Value {
    json!({
        "weights": symmetry_name(grid.quant.sym_w),
        "activations": symmetry_name(grid.quant.sym_a),
        "static_a": grid.quant.static_a.as_ref().map(|m| {
            m.iter()
                .map(|(k, v)| (k.clone(), json!(v.iter().map(|r| [r.lo, r.hi]).collect::<Vec<_>>())))
                .collect::<serde_json::Map<_, _>>()
        }),
        "transforms": grid.transforms.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
        "bit_pairs": grid.bit_pairs.iter().map(|&(w, x)| [w, x]).collect::<Vec<_>>(),
        "eps": grid.eps,
        "bundles": bundles,
    })
}

pub fn run_sweep(cli: &Cli, s: &SweepSpec, base: &Path, stdout: &mut dyn Write) -> Result<()> {
    let default_seed = cli.seed.unwrap_or(0);
    if s.bundles.is_empty() && s.synth.is_none() {
        return Err(Error::Config("sweep needs `bundles` or `synth`".into()));
    }
    let grid = GridConfig {
        quant: QuantSettings {
            sym_w: s.weights,
            sym_a: s.activations,
            static_a: None,
        },
        transforms: parse_transforms(&s.transforms, default_seed)?,
        bit_pairs: s.bit_pairs.iter().map(|p| (p[0], p[1])).collect(),
        eps: cli.eps,
        validate: false,
    };
    grid.check()?;

    let mut sources: Vec<(String, TensorBundle)> = Vec::new();
    for p in &s.bundles {
        let path = if p.is_absolute() { p.clone() } else { base.join(p) };
        sources.push((p.display().to_string(), load_bundle(&path)?));
    }
    let mut seeds = Vec::new();
    if let Some(synth) = &s.synth {
        seeds = if s.seeds.is_empty() {
            vec![cli.seed.unwrap_or(synth.seed)]
        } else {
            s.seeds.clone()
        };
        for &seed in &seeds {
            let mut spec = synth.clone();
            spec.seed = seed;
            sources.push((format!("seed{seed}"), spec.generate()?));
        }
    }
    let single = sources.len() == 1;
    let mut rows = Vec::new();
    for (name, bundle) in &sources {
        rows.extend(run_bundle(bundle, (!single).then_some(name.as_str()), &grid)?);
    }
    let summaries: Vec<Value> = sources
        .iter()
        .map(|(n, b)| json!({"source": n, "tensors": bundle_summary(b)}))
        .collect();
    let meta = Metadata::new("sweep", if seeds.is_empty() { vec![default_seed] } else { seeds }, &grid_json(&grid, &summaries));
    let report = Report::new(rows, meta)?.with_shift_checks();
    emit(cli, &report, stdout)
}
