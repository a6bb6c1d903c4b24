//! Named parameter storage with seeded initialization.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Transformer,
    Cnn,
    Coupling,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Transformer => "transformer",
            ParamGroup::Cnn => "cnn",
            ParamGroup::Coupling => "coupling",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "transformer" => Some(ParamGroup::Transformer),
            "cnn" => Some(ParamGroup::Cnn),
            "coupling" => Some(ParamGroup::Coupling),
            _ => None,
        }
    }

    /// Group implied by the leading name component.
    pub fn of_name(name: &str) -> Option<Self> {
        Self::parse(name.split('.').next()?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub var: Var,
    pub trainable: bool,
}

/// Shared, ordered map from dotted names to variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Entry>>>,
    dtype: DType,
    device: Device,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Kaiming-normal for ReLU-like fan-in.
    Kaiming { fan_in: usize },
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Entry>> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub(crate) fn insert(&self, name: &str, t: Tensor, trainable: bool) -> Result<Tensor> {
        let mut map = self.lock();
        if map.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?.contiguous()?)?;
        let out = var.as_tensor().clone();
        map.insert(name.to_string(), Entry { var, trainable });
        Ok(out)
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().get(name).map(|e| e.var.clone())
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Every stored tensor (including running statistics) in name order.
    pub fn all(&self) -> Vec<(String, Var)> {
        self.lock().iter().map(|(k, e)| (k.clone(), e.var.clone())).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites the value of each named tensor present in `values`.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let map = self.lock();
        for (name, t) in values {
            let entry = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if entry.var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    entry.var.dims(),
                    t.dims()
                )));
            }
            entry.var.set(&t.to_dtype(self.dtype)?.contiguous()?)?;
        }
        Ok(())
    }

    /// Deep copy of every value, detached from this store.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.lock()
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }
}

/// Creates parameters under a name prefix, drawing initial values from a
/// seeded generator so that model construction is reproducible.
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl ParamBuilder {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            store: self.store.clone(),
            prefix,
            rng: self.rng.clone(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn values(&self, n: usize, init: Init) -> Vec<f32> {
        let mut rng = self.rng.lock().expect("rng poisoned");
        let normal = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        };
        match init {
            Init::Const(c) => vec![c as f32; n],
            Init::Normal(std) => normal(std, &mut rng),
            Init::Kaiming { fan_in } => normal((2.0 / fan_in.max(1) as f64).sqrt(), &mut rng),
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b) as f32).collect(),
        }
    }

    fn create(&self, name: &str, dims: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        let n = dims.iter().product();
        let t = Tensor::from_vec(self.values(n, init), dims, self.device())?;
        self.store.insert(&self.full_name(name), t, trainable)
    }

    pub fn param(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, dims, init, true)
    }

    /// A stored tensor that the optimizer never touches.
    pub fn buffer(&self, name: &str, dims: &[usize], init: Init) -> Result<Var> {
        self.create(name, dims, init, false)?;
        Ok(self
            .store
            .get(&self.full_name(name))
            .expect("buffer was just inserted"))
    }
}
