//! Named, seeded parameter storage.
//!
//! candle's own initializers draw from an unseeded thread RNG, so every
//! parameter here is sampled from a ChaCha stream owned by the store. Two
//! stores built with the same seed and the same construction order hold
//! bitwise-identical parameters.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use glyphdit_core::rng::{self, Rng};
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
}

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(rng::derived(seed, 0x9A_2A_45)),
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

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    fn sample(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => self.normal(n, std)?,
            Init::Fan { fan_in, gain } => {
                if fan_in == 0 {
                    return Err(invalid("fan_in must be >= 1"));
                }
                self.normal(n, gain / (fan_in as f64).sqrt())?
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).map_err(|e| invalid(e.to_string()))?;
                let mut r = self.rng.lock().expect("rng lock");
                (0..n).map(|_| d.sample(&mut *r)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn normal(&self, n: usize, std: f64) -> Result<Vec<f64>> {
        let d = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let mut r = self.rng.lock().expect("rng lock");
        Ok((0..n).map(|_| d.sample(&mut *r)).collect())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.sample(shape, init)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let mut vars = self.vars.lock().expect("vars lock");
        if vars.contains_key(&name) {
            return Err(invalid(format!("parameter {name} registered twice")));
        }
        vars.insert(name, var);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("vars lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().expect("vars lock").keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("vars lock").get(name).cloned()
    }

    /// All variables whose name starts with one of `prefixes`, in name order.
    /// An empty prefix list selects everything.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("vars lock")
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Variables selected by an arbitrary name predicate.
    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("vars lock")
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Snapshot of every parameter (detached copies).
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let vars = self.vars.lock().expect("vars lock");
        let mut out = BTreeMap::new();
        for (k, v) in vars.iter() {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// Overwrite parameters in place from `tensors`. Names absent from the
    /// store are an error; store entries absent from `tensors` are left alone
    /// unless `require_all` is set.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, require_all: bool) -> Result<()> {
        let vars = self.vars.lock().expect("vars lock");
        for (k, t) in tensors {
            let var = vars
                .get(k)
                .ok_or_else(|| invalid(format!("unknown parameter {k}")))?;
            if var.dims() != t.dims() {
                return Err(invalid(format!(
                    "parameter {k}: shape {:?} does not match {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if require_all {
            if let Some(missing) = vars.keys().find(|k| !tensors.contains_key(*k)) {
                return Err(invalid(format!("parameter {missing} missing from source")));
            }
        }
        Ok(())
    }

    /// Copy every parameter present in both stores from `other`.
    pub fn copy_shared_from(&self, other: &ParamStore) -> Result<usize> {
        let src = other.tensors()?;
        let names = self.names();
        let shared: BTreeMap<String, Tensor> = src
            .into_iter()
            .filter(|(k, _)| names.contains(k))
            .collect();
        let n = shared.len();
        self.load(&shared, false)?;
        Ok(n)
    }

    /// Add N(0, std) noise to every parameter selected by `keep`. Used to move
    /// zero-initialized branches off their degenerate starting point.
    pub fn jitter(&self, std: f64, keep: impl Fn(&str) -> bool) -> Result<()> {
        for (_, var) in self.vars_where(keep) {
            let noise = self.sample(var.dims(), Init::Normal(std))?;
            var.set(&(var.as_tensor() + noise)?)?;
        }
        Ok(())
    }

    /// Order-sensitive hash over the exact bit patterns of the selected parameters.
    pub fn checksum(&self, keep: impl Fn(&str) -> bool) -> Result<u64> {
        let mut h = 0u64;
        for (name, var) in self.vars_where(keep) {
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let mut bytes = name.into_bytes();
            for v in values {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            h = rng::mix(h, rng::hash_bytes(&bytes));
        }
        Ok(h)
    }
}

/// A prefixed view into a [`ParamStore`] used while building modules.
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape, init)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
