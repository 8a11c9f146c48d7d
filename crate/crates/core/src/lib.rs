//! Quantization SQNR analysis for linear layers.
//!
//! Measures the signal-to-quantization-noise ratio of fake-quantized layers,
//! predicts it from concentration and alignment, and builds the
//! function-preserving transforms (channel scaling, Hadamard rotations,
//! alignment-optimal and block transforms) that improve those two quantities.

pub mod analysis;
pub mod bundle;
pub mod error;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod spd;
pub mod synth;
pub mod tensor;
pub mod transforms;

pub use analysis::{analyze_layer, validate_layer, Flag, LayerAnalysis, LayerValidation, NoiseReport};
pub use bundle::{load_bundle, save_bundle, Tensor, TensorBundle, TensorKind};
pub use error::{Error, Result};
pub use metrics::{Autocorrelation, Decibel, Ratio};
pub use quant::{Granularity, QuantConfig, QuantRange, RangePolicy, Symmetry};
pub use rng::{Seed, SeededRng};
pub use spd::SpdMatrix;
pub use synth::{Covariance, DistSpec, Family, SynthSpec};
pub use tensor::{ActivationSet, LinearLayer, Matrix};
pub use transforms::{AppliedTransform, TransformKind, TransformSpec};
