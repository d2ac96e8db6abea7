//! Named parameter collections, initialization and checkpoint archives.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters keyed by layer path, e.g. `enc0.conv1.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }
}

/// Graph handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Collects the gradient of every bound parameter; parameters that did
    /// not influence the root get zeros.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), t)
            })
            .collect()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn convert<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.convert())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_f64().unwrap().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same names and shapes as `other`.
    pub fn same_layout<U: Scalar>(&self, other: &ParamSet<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

/// Deterministic initializer: He-normal conv and linear weights, zero biases,
/// unit normalization scales.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
    pub gain: f64,
}

impl<R: Rng> Init<'_, R> {
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        let std = self.gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng) as f32).collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }
}

fn archive_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.safetensors")),
        dir.join(format!("{name}.arch.json")),
    )
}

/// Writes `<name>.safetensors` and `<name>.arch.json` under `dir`.
pub fn save_archive<A: Serialize>(dir: &Path, name: &str, arch: &A, params: &ParamSet<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (p_path, a_path) = archive_paths(dir, name);
    let bytes: Vec<(String, Vec<u8>)> = params
        .iter()
        .map(|(k, t)| (k.to_string(), t.data().iter().flat_map(|x| x.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .zip(params.iter())
        .map(|((k, b), (_, t))| {
            TensorView::new(Dtype::F32, t.shape().to_vec(), b)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let blob = safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&p_path, blob).map_err(|e| Error::io(&p_path, e))?;
    let json = serde_json::to_string_pretty(arch).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&a_path, json).map_err(|e| Error::io(&a_path, e))?;
    Ok(())
}

/// Reads the architecture sidecar of an archive.
pub fn load_arch<A: DeserializeOwned>(dir: &Path, name: &str) -> Result<A> {
    let (_, a_path) = archive_paths(dir, name);
    let text = fs::read_to_string(&a_path).map_err(|e| Error::io(&a_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", a_path.display())))
}

/// Loads an archive whose architecture must equal `expected`; names and
/// shapes must match `template`.
pub fn load_archive<A: DeserializeOwned + PartialEq + std::fmt::Debug>(
    dir: &Path,
    name: &str,
    expected: &A,
    template: &ParamSet<f32>,
) -> Result<ParamSet<f32>> {
    let arch: A = load_arch(dir, name)?;
    if &arch != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch for `{name}`: stored {arch:?}, expected {expected:?}"
        )));
    }
    let (p_path, _) = archive_paths(dir, name);
    let blob = fs::read(&p_path).map_err(|e| Error::io(&p_path, e))?;
    let st = SafeTensors::deserialize(&blob).map_err(|e| Error::Checkpoint(format!("{}: {e}", p_path.display())))?;
    let mut out = ParamSet::new();
    for (k, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("`{k}` is {:?}, expected F32", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(k, Tensor::from_vec(view.shape(), data)?);
    }
    if !out.same_layout(template) {
        return Err(Error::Checkpoint(format!(
            "parameter layout of `{}` does not match the architecture",
            p_path.display()
        )));
    }
    if !out.is_finite() {
        return Err(Error::Checkpoint(format!(
            "non-finite parameters in `{}`",
            p_path.display()
        )));
    }
    Ok(out)
}
