//! Named, seeded parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a dotted name. Initial
//! values are drawn from a ChaCha stream keyed by `(seed, name)`, so a
//! parameter's starting value does not depend on construction order. Stores
//! are iterated in name order, which fixes the checkpoint blob order and the
//! order of optimizer updates.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-bound, bound).
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// PyTorch's default `nn.Linear` weight init for the given fan-in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

/// Stable 64-bit hash (FNV-1a) used to key per-parameter RNG streams.
pub(crate) fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn host_tensor(values: Vec<f64>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let t = match dtype {
        DType::F64 => Tensor::from_vec(values, shape, &Device::Cpu)?,
        _ => {
            let v: Vec<f32> = values.into_iter().map(|x| x as f32).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?
        }
    };
    Ok(t)
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    seed: u64,
    prefix: String,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .field("prefix", &self.prefix)
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            seed,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    /// A view of the same store with `name.` prepended to every lookup.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            inner: self.inner.clone(),
            dtype: self.dtype,
            seed: self.seed,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Fetches `name`, creating it with `init` on first use.
    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        let mut map = self.inner.lock().expect("param store poisoned");
        if let Some(v) = map.get(&full) {
            if v.shape() != &shape {
                return Err(Error::Contract(format!(
                    "parameter {full} has shape {:?}, requested {:?}",
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.init_values(&full, shape.elem_count(), init);
        let var = Var::from_tensor(&host_tensor(values, shape, self.dtype)?)?;
        let t = var.as_tensor().clone();
        map.insert(full, var);
        Ok(t)
    }

    fn init_values(&self, full: &str, n: usize, init: Init) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(full));
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).expect("valid bound");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").get(name).cloned()
    }

    pub fn num_elements(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in self.vars() {
            map.insert(k, Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            inner: Arc::new(Mutex::new(map)),
            dtype: self.dtype,
            seed: self.seed,
            prefix: String::new(),
        })
    }

    /// Overwrites every variable with the same-named variable of `other`.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.vars() {
            let src = other
                .var(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }

    /// Flattened host values of one parameter, in f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self
            .var(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}
