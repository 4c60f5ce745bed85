//! Named trainable parameters and the tensor maps they are loaded from.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};

/// A named collection of tensors read from a safetensors file or generated
/// in memory. Lookups fall back to the legacy `gamma`/`beta` layer-norm
/// names and tolerate a single architecture prefix (`bert.`, `roberta.`,
/// `albert.`) in front of every name.
#[derive(Debug, Clone)]
pub struct Weights {
    tensors: HashMap<String, Tensor>,
    origin: String,
}

const ARCH_PREFIXES: &[&str] = &["bert.", "roberta.", "albert."];

impl Weights {
    pub fn new(tensors: HashMap<String, Tensor>, origin: impl Into<String>) -> Self {
        Self {
            tensors,
            origin: origin.into(),
        }
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let tensors =
            candle_core::safetensors::load(path, device).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Ok(Self::new(tensors, path.display().to_string()))
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    fn lookup(&self, name: &str) -> Option<&Tensor> {
        let legacy = name
            .strip_suffix(".weight")
            .map(|s| format!("{s}.gamma"))
            .or_else(|| name.strip_suffix(".bias").map(|s| format!("{s}.beta")));
        let candidates = std::iter::once(name.to_string()).chain(legacy);
        for candidate in candidates {
            if let Some(t) = self.tensors.get(&candidate) {
                return Some(t);
            }
            for prefix in ARCH_PREFIXES {
                if let Some(t) = self.tensors.get(&format!("{prefix}{candidate}")) {
                    return Some(t);
                }
            }
        }
        None
    }

    /// Fetches `name`, checking its shape and converting to `dtype`.
    pub fn get(&self, name: &str, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let t = self
            .lookup(name)
            .ok_or_else(|| Error::checkpoint(PathBuf::from(&self.origin), format!("missing tensor {name:?}")))?;
        if t.dims() != shape {
            return Err(Error::ShapeMismatch(format!(
                "{name} in {} has shape {:?}, expected {shape:?}",
                self.origin,
                t.dims()
            )));
        }
        Ok(t.to_dtype(dtype)?.to_device(device)?)
    }
}

/// Trainable parameters in registration order. Tensors handed out by
/// [`ParamStore::register`] share storage with the stored [`Var`]s, so
/// optimizer updates are visible to the modules holding them.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: &Tensor) -> Result<Tensor> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidConfig(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(value)?;
        let tensor = var.as_tensor().clone();
        self.params.push((name, var));
        Ok(tensor)
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.params.iter().map(|(_, v)| v)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Detached copies of every parameter under `prefix`, with the prefix
    /// stripped from the names.
    pub fn snapshot(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(n, v)| {
                n.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), v.as_detached_tensor()))
            })
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Pulls tensors from a [`Weights`] source into a [`ParamStore`] under a
/// destination prefix.
pub(crate) struct ParamLoader<'a> {
    pub source: &'a Weights,
    pub store: &'a mut ParamStore,
    pub prefix: String,
    pub dtype: DType,
    pub device: Device,
}

impl ParamLoader<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.source.get(name, shape, self.dtype, &self.device)?;
        self.store.register(format!("{}{name}", self.prefix), &t)
    }
}
