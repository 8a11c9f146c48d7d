//! On-disk tensor bundles.
//!
//! A bundle is a directory holding `manifest.json` plus one payload file per
//! tensor. Payloads are raw little-endian IEEE-754 `f64` values in row-major
//! order, so a tensor of shape `[r, c]` occupies exactly `r * c * 8` bytes.
//!
//! ```json
//! {"tensors": [
//!   {"name": "blk0", "kind": "activations", "shape": [4096, 64], "file": "0000_blk0.f64"},
//!   {"name": "blk0/q", "kind": "weight", "shape": [64, 64], "file": "0001_blk0__q.f64"}
//! ]}
//! ```
//!
//! Weights are paired with the activations that feed them by name: a weight
//! called `G/L` reads the activations tensor `G`, and layers sharing `G` form
//! one input group. A weight without a `/` uses the only activations tensor
//! in the bundle.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{ActivationSet, LinearLayer, Matrix};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Activations,
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

/// A named tensor held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, kind: TensorKind, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            kind,
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.data.clone()),
            [n] => Matrix::new(1, *n, self.data.clone()),
            other => Err(Error::Dimension(format!(
                "tensor {} has rank {}, expected a matrix",
                self.name,
                other.len()
            ))),
        }
    }

    fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An in-memory collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    tensors: Vec<Tensor>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        ensure!(
            self.get(&tensor.name).is_none(),
            Validation,
            "duplicate tensor name {}",
            tensor.name
        );
        ensure!(
            tensor.data.len() == tensor.element_count(),
            Dimension,
            "tensor {}: shape {:?} needs {} values, got {}",
            tensor.name,
            tensor.shape,
            tensor.element_count(),
            tensor.data.len()
        );
        if matches!(tensor.kind, TensorKind::Weight | TensorKind::Activations) {
            ensure!(
                tensor.shape.len() == 2,
                Dimension,
                "tensor {}: {:?} must be 2-D",
                tensor.name,
                tensor.kind
            );
        }
        ensure!(
            tensor.data.iter().all(|v| v.is_finite()),
            Data,
            "tensor {} contains NaN or infinite values",
            tensor.name
        );
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, kind: TensorKind, m: &Matrix) -> Result<()> {
        self.push(Tensor::from_matrix(name, kind, m))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("bundle has no tensor named {name}")))?
            .to_matrix()
    }

    pub fn activations(&self, name: &str) -> Result<ActivationSet> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("bundle has no activations named {name}")))?;
        ensure!(
            t.kind == TensorKind::Activations,
            Data,
            "tensor {name} is a {:?}, not activations",
            t.kind
        );
        ActivationSet::new(t.to_matrix()?)
    }

    pub fn names_of(&self, kind: TensorKind) -> impl Iterator<Item = &str> + '_ {
        self.tensors
            .iter()
            .filter(move |t| t.kind == kind)
            .map(|t| t.name.as_str())
    }

    /// Resolves every weight to its input activations, validating shapes.
    ///
    /// Returns `(layer, activations name)` pairs in manifest order. The
    /// layer's group is the activations name.
    pub fn layer_pairs(&self) -> Result<Vec<(LinearLayer, String)>> {
        let acts: Vec<&str> = self.names_of(TensorKind::Activations).collect();
        let mut out = Vec::new();
        for t in self.tensors.iter().filter(|t| t.kind == TensorKind::Weight) {
            let input = match t.name.rsplit_once('/') {
                Some((group, _)) => group.to_string(),
                None => match acts.as_slice() {
                    [only] => only.to_string(),
                    _ => {
                        return Err(Error::Data(format!(
                            "weight {} has no group prefix and the bundle holds {} activation tensors",
                            t.name,
                            acts.len()
                        )))
                    }
                },
            };
            let x = self.get(&input).ok_or_else(|| {
                Error::Data(format!(
                    "weight {} expects activations {input}, which the bundle lacks",
                    t.name
                ))
            })?;
            let w = t.to_matrix()?;
            ensure!(
                x.shape.get(1) == Some(&w.cols()),
                Dimension,
                "weight {} has {} input channels but activations {} have shape {:?}",
                t.name,
                w.cols(),
                input,
                x.shape
            );
            out.push((LinearLayer::new(&t.name, w, Some(input.clone()))?, input));
        }
        Ok(out)
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            tensors: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| ManifestEntry {
                    name: t.name.clone(),
                    kind: t.kind,
                    shape: t.shape.clone(),
                    file: payload_file_name(i, &t.name),
                })
                .collect(),
        }
    }
}

fn payload_file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '_' | '.' => c,
            '/' => '~',
            _ => '_',
        })
        .collect();
    format!("{index:04}_{safe}.f64")
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<TensorBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Format(format!(
            "{} not found",
            manifest_path.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;

    let mut seen = HashSet::new();
    let mut bundle = TensorBundle::new();
    for entry in manifest.tensors {
        ensure!(
            seen.insert(entry.name.clone()),
            Format,
            "duplicate tensor name {} in manifest",
            entry.name
        );
        ensure!(
            !entry.file.contains("..") && !Path::new(&entry.file).is_absolute(),
            Format,
            "payload path {} escapes the bundle directory",
            entry.file
        );
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Corruption(format!("payload {} for {} is missing", path.display(), entry.name))
            } else {
                Error::io(&path, e)
            }
        })?;
        let expected = entry.shape.iter().product::<usize>() * 8;
        ensure!(
            bytes.len() == expected,
            Corruption,
            "tensor {} with shape {:?} needs {expected} bytes, payload {} has {}",
            entry.name,
            entry.shape,
            entry.file,
            bytes.len()
        );
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        bundle.push(Tensor {
            name: entry.name,
            kind: entry.kind,
            shape: entry.shape,
            data,
        })?;
    }
    Ok(bundle)
}

/// Writes a bundle, creating the directory if needed.
pub fn save_bundle(bundle: &TensorBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = bundle.manifest();
    for (entry, tensor) in manifest.tensors.iter().zip(&bundle.tensors) {
        let mut bytes = Vec::with_capacity(tensor.data.len() * 8);
        for v in &tensor.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&entry.file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = TensorBundle::new();
        b.push_matrix("w", TensorKind::Weight, &Matrix::identity(2))
            .unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        let m = back.matrix("w").unwrap();
        assert_eq!(m, Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    }

    #[test]
    fn short_payload_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"tensors":[{"name":"a","kind":"matrix","shape":[4,8],"file":"a.f64"}]}"#,
        )
        .unwrap();
        fs::write(dir.path().join("a.f64"), vec![0u8; 128]).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)), "{err}");
        assert!(err.to_string().contains("256"));
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn nan_payload_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"tensors":[{"name":"a","kind":"matrix","shape":[1,1],"file":"a.f64"}]}"#,
        )
        .unwrap();
        fs::write(dir.path().join("a.f64"), f64::NAN.to_le_bytes()).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn empty_bundle_writes_only_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&TensorBundle::new(), dir.path()).unwrap();
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert!(m.tensors.is_empty());
        assert!(load_bundle(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn scalar_payload_is_le_f64() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = TensorBundle::new();
        b.push_matrix("s", TensorKind::Matrix, &Matrix::new(1, 1, vec![3.5]).unwrap())
            .unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(payload_file_name(0, "s"))).unwrap();
        assert_eq!(bytes, [0, 0, 0, 0, 0, 0, 0x0c, 0x40]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = TensorBundle::new();
        b.push_matrix("a", TensorKind::Matrix, &Matrix::identity(1)).unwrap();
        assert!(b.push_matrix("a", TensorKind::Matrix, &Matrix::identity(1)).is_err());
    }

    #[test]
    fn pairs_by_group_prefix() {
        let mut b = TensorBundle::new();
        b.push_matrix("g", TensorKind::Activations, &Matrix::identity(3)).unwrap();
        b.push_matrix("g/a", TensorKind::Weight, &Matrix::identity(3)).unwrap();
        b.push_matrix("h/b", TensorKind::Weight, &Matrix::identity(3)).unwrap();
        assert!(matches!(b.layer_pairs(), Err(Error::Data(_))));

        let mut b = TensorBundle::new();
        b.push_matrix("g", TensorKind::Activations, &Matrix::identity(3)).unwrap();
        b.push_matrix("w", TensorKind::Weight, &Matrix::identity(2).matmul(&Matrix::from_fn(2, 2, |_, _| 1.0)).unwrap()).unwrap();
        let err = b.layer_pairs().unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(err.to_string().contains("w") && err.to_string().contains("g"));
    }
}
