//! Synthetic weights and activations with controllable concentration and
//! alignment.
//!
//! Activations are produced as `x = L z` where `z` has i.i.d. unit-scale
//! entries from the chosen family and `L` is the symmetric square root of the
//! target covariance. Outlier channels are multiplied in afterwards, so the
//! sample autocorrelation converges to `var(family) · D K D` with `D` the
//! diagonal of outlier factors.

use serde::{Deserialize, Serialize};

use crate::bundle::{TensorBundle, TensorKind};
use crate::error::{ensure, Error, Result};
use crate::rng::{Seed, SeededRng};
use crate::tensor::{ActivationSet, LinearLayer, Matrix};

/// Marginal distribution of the white samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Laplace,
    StudentT { nu: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        if let Family::StudentT { nu } = *self {
            ensure!(
                nu > 2.0 && nu.is_finite(),
                Validation,
                "student_t needs nu > 2 for a finite variance, got {nu}"
            );
        }
        Ok(())
    }

    /// Variance of a unit-scale draw.
    pub fn variance(&self) -> f64 {
        match *self {
            Family::Gaussian => 1.0,
            Family::Laplace => 2.0,
            Family::StudentT { nu } => nu / (nu - 2.0),
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            Family::Gaussian => rng.normal(),
            Family::Laplace => rng.laplace(),
            Family::StudentT { nu } => rng.student_t(nu),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Family::Gaussian => "gaussian".into(),
            Family::Laplace => "laplace".into(),
            Family::StudentT { nu } => format!("student_t({nu})"),
        }
    }
}

/// Channel covariance of the generated activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Identity,
    /// Per-channel standard deviations; the covariance is `diag(scales²)`.
    Diagonal { scales: Vec<f64> },
    /// Random orthogonal eigenbasis with log-uniform eigenvalues whose
    /// largest/smallest ratio is exactly `condition_number`, normalised to
    /// unit mean eigenvalue.
    RandomSpd { condition_number: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub channel: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSpec {
    pub family: Family,
    #[serde(default = "default_covariance")]
    pub covariance: Covariance,
    #[serde(default)]
    pub outlier_channels: Vec<Outlier>,
}

fn default_covariance() -> Covariance {
    Covariance::Identity
}

impl DistSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            covariance: Covariance::Identity,
            outlier_channels: Vec::new(),
        }
    }

    pub fn with_covariance(mut self, covariance: Covariance) -> Self {
        self.covariance = covariance;
        self
    }

    pub fn with_outlier(mut self, channel: usize, factor: f64) -> Self {
        self.outlier_channels.push(Outlier { channel, factor });
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.family.validate()?;
        match &self.covariance {
            Covariance::Identity => {}
            Covariance::Diagonal { scales } => {
                ensure!(
                    scales.len() == d,
                    Validation,
                    "diagonal covariance has {} scales for {d} channels",
                    scales.len()
                );
                ensure!(
                    scales.iter().all(|s| s.is_finite() && *s > 0.0),
                    Validation,
                    "diagonal scales must be positive and finite"
                );
            }
            Covariance::RandomSpd { condition_number } => ensure!(
                condition_number.is_finite() && *condition_number >= 1.0,
                Validation,
                "condition_number must be >= 1, got {condition_number}"
            ),
        }
        for o in &self.outlier_channels {
            ensure!(
                o.channel < d,
                Validation,
                "outlier channel {} out of range for {d} channels",
                o.channel
            );
            ensure!(
                o.factor.is_finite() && o.factor >= 1.0,
                Validation,
                "outlier factor must be >= 1, got {}",
                o.factor
            );
        }
        Ok(())
    }

    /// Exact autocorrelation `E[x xᵀ]` of the generator for `d` channels.
    ///
    /// `seed` must be the one passed to [`gen_activations`] since random
    /// covariances are drawn from it.
    pub fn autocorrelation(&self, d: usize, seed: Seed) -> Result<Matrix> {
        self.validate(d)?;
        let k = self.covariance_matrix(d, seed)?;
        let mut amp = vec![1.0; d];
        for o in &self.outlier_channels {
            amp[o.channel] *= o.factor;
        }
        let var = self.family.variance();
        Ok(Matrix::from_fn(d, d, |i, j| var * amp[i] * amp[j] * k.get(i, j)))
    }

    fn covariance_matrix(&self, d: usize, seed: Seed) -> Result<Matrix> {
        Ok(match &self.covariance {
            Covariance::Identity => Matrix::identity(d),
            Covariance::Diagonal { scales } => {
                Matrix::from_diagonal(&scales.iter().map(|s| s * s).collect::<Vec<_>>())
            }
            Covariance::RandomSpd { condition_number } => {
                let (q, eig) = random_spectrum(d, *condition_number, seed.derive(COV_STREAM));
                let qe = Matrix::from_fn(d, d, |i, j| q.get(i, j) * eig[j]);
                qe.matmul_t(&q)?.symmetrized()
            }
        })
    }
}

const COV_STREAM: u64 = 0xC0;
const SAMPLE_STREAM: u64 = 0x5A;

/// Random orthogonal basis and log-uniform spectrum with exact condition number.
fn random_spectrum(d: usize, cond: f64, seed: Seed) -> (Matrix, Vec<f64>) {
    let mut rng = SeededRng::new(seed);
    let q = random_orthogonal(d, &mut rng);
    let mut eig: Vec<f64> = (0..d)
        .map(|i| match i {
            0 => 1.0,
            _ if i == d - 1 => 1.0 / cond,
            _ => cond.powf(-rng.uniform()),
        })
        .collect();
    let mean = eig.iter().sum::<f64>() / d as f64;
    eig.iter_mut().for_each(|v| *v /= mean);
    (q, eig)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal(d: usize, rng: &mut SeededRng) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.normal()).to_nalgebra();
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Matrix::from_fn(d, d, |i, j| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * s
    })
}

/// Symmetric positive definite matrix with the given condition number.
pub fn random_spd(d: usize, condition_number: f64, seed: Seed) -> Result<Matrix> {
    ensure!(
        condition_number >= 1.0,
        Validation,
        "condition number must be >= 1"
    );
    let (q, eig) = random_spectrum(d, condition_number, seed);
    let qe = Matrix::from_fn(d, d, |i, j| q.get(i, j) * eig[j]);
    Ok(qe.matmul_t(&q)?.symmetrized())
}

/// Draws `n` tokens of `d` channels.
pub fn gen_activations(d: usize, n: usize, spec: &DistSpec, seed: Seed) -> Result<ActivationSet> {
    ensure!(d >= 1 && n >= 1, Validation, "need d >= 1 and n >= 1");
    spec.validate(d)?;
    let mut rng = SeededRng::new(seed.derive(SAMPLE_STREAM));
    let white = Matrix::from_fn(n, d, |_, _| spec.family.sample(&mut rng));
    let mut x = match &spec.covariance {
        Covariance::Identity => white,
        Covariance::Diagonal { scales } => {
            Matrix::from_fn(n, d, |t, c| white.get(t, c) * scales[c])
        }
        Covariance::RandomSpd { condition_number } => {
            let (q, eig) = random_spectrum(d, *condition_number, seed.derive(COV_STREAM));
            // symmetric square root Q Λ^½ Qᵀ, applied to each token row
            let qs = Matrix::from_fn(d, d, |i, j| q.get(i, j) * eig[j].sqrt());
            let root = qs.matmul_t(&q)?.symmetrized();
            white.matmul_t(&root)?
        }
    };
    for o in &spec.outlier_channels {
        for t in 0..n {
            let v = x.get(t, o.channel) * o.factor;
            x.set(t, o.channel, v);
        }
    }
    ActivationSet::new(x)
}

/// I.i.d. unit-scale weight matrix; rows that come out all-zero are redrawn.
pub fn gen_weight(d_out: usize, d_in: usize, family: Family, seed: Seed) -> Result<Matrix> {
    ensure!(d_out >= 1 && d_in >= 1, Validation, "need d_out, d_in >= 1");
    family.validate()?;
    let mut rng = SeededRng::new(seed.derive(SAMPLE_STREAM));
    let mut w = Matrix::from_fn(d_out, d_in, |_, _| family.sample(&mut rng));
    for i in 0..d_out {
        while w.row(i).iter().all(|&v| v == 0.0) {
            for v in w.row_mut(i) {
                *v = family.sample(&mut rng);
            }
        }
    }
    Ok(w)
}

pub fn gen_layer(
    name: impl Into<String>,
    d_out: usize,
    d_in: usize,
    family: Family,
    seed: Seed,
) -> Result<LinearLayer> {
    LinearLayer::new(name, gen_weight(d_out, d_in, family, seed)?, None)
}

/// JSON document accepted by the `synth` command.
///
/// ```json
/// {
///   "seed": 7,
///   "tokens": 4096,
///   "groups": [{
///     "name": "blk0",
///     "channels": 64,
///     "activations": {"family": "gaussian",
///                     "covariance": {"random_spd": {"condition_number": 100}},
///                     "outlier_channels": [{"channel": 3, "factor": 20}]},
///     "layers": [{"name": "q", "d_out": 64, "family": {"student_t": {"nu": 5}}}]
///   }]
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub tokens: usize,
    pub groups: Vec<SynthGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGroup {
    pub name: String,
    pub channels: usize,
    pub activations: DistSpec,
    #[serde(default)]
    pub layers: Vec<SynthLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLayer {
    pub name: String,
    pub d_out: usize,
    #[serde(default = "default_family")]
    pub family: Family,
}

fn default_family() -> Family {
    Family::Gaussian
}

impl SynthSpec {
    /// Generates the bundle. Group `g` draws activations from stream
    /// `derive(2g)` and its layer `l` from `derive(2g + 1).derive(l)`.
    pub fn generate(&self) -> Result<TensorBundle> {
        ensure!(self.tokens >= 1, Validation, "tokens must be >= 1");
        ensure!(!self.groups.is_empty(), Validation, "groups must not be empty");
        let master = Seed(self.seed);
        let mut bundle = TensorBundle::new();
        for (g, group) in self.groups.iter().enumerate() {
            ensure!(
                !group.name.contains('/'),
                Validation,
                "group name {} must not contain '/'",
                group.name
            );
            let x = gen_activations(
                group.channels,
                self.tokens,
                &group.activations,
                master.derive(2 * g as u64),
            )
            .map_err(|e| Error::Validation(format!("groups[{g}].activations: {e}")))?;
            bundle.push_matrix(&group.name, TensorKind::Activations, x.matrix())?;
            let layer_seed = master.derive(2 * g as u64 + 1);
            for (l, layer) in group.layers.iter().enumerate() {
                let w = gen_weight(layer.d_out, group.channels, layer.family, layer_seed.derive(l as u64))
                    .map_err(|e| Error::Validation(format!("groups[{g}].layers[{l}]: {e}")))?;
                bundle.push_matrix(format!("{}/{}", group.name, layer.name), TensorKind::Weight, &w)?;
            }
        }
        Ok(bundle)
    }
}
