use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named trainable parameters. Names are dot-separated namespaces such as
/// `flow.0.post.weight`. Clones share the same storage.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(name, var)` pairs in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Pairs whose name starts with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_elements(&self, prefixes: &[&str]) -> usize {
        self.vars_with_prefix(prefixes)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Detached copies of the selected parameters.
    pub fn snapshot(&self, prefixes: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        self.vars_with_prefix(prefixes)
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites existing parameters with `values`; shapes must agree.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in values {
            let var = self
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
            if var.shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}`: shape {:?} vs stored {:?}",
                    value.shape(),
                    var.shape()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&name) {
            if v.shape() != &shape {
                return Err(Error::Contract(format!(
                    "parameter `{name}` re-requested with shape {shape:?}, has {:?}",
                    v.shape()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| inner.rng.random_range(-a..=a)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

/// Prefix-scoped view used while constructing modules.
#[derive(Clone)]
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamBuilder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
