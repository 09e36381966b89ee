use std::collections::BTreeMap;
use std::marker::PhantomData;
use std::sync::{Arc, Mutex};

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    /// Uniform with bound `1/sqrt(fan_in)`.
    FanIn(usize),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    zero_init: bool,
}

/// Named, ordered collection of trainable parameters.
///
/// Cloning shares the underlying storage. Parameters are created lazily by model
/// constructors through a [`Scope`]; a name that already exists is reused (this is how
/// checkpoints and EMA snapshots are turned back into models).
pub struct ParamStore<T: Real> {
    inner: Arc<Mutex<Inner>>,
    device: Device,
    _scalar: PhantomData<T>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone(),
            device: self.device.clone(),
            _scalar: PhantomData,
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Empty store whose random initializations are driven by `seed`.
    pub fn new(seed: u64) -> Self {
        Self::build(BTreeMap::new(), seed, false)
    }

    /// Store that initializes every parameter to zero; used for parameter counting.
    pub fn zeroed() -> Self {
        Self::build(BTreeMap::new(), 0, true)
    }

    /// Store pre-populated with the given values (copied into fresh variables).
    pub fn from_tensors(values: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in values {
            vars.insert(name.clone(), Var::from_tensor(&t.to_dtype(T::DTYPE)?.copy()?)?);
        }
        Ok(Self::build(vars, 0, false))
    }

    fn build(vars: BTreeMap<String, Var>, seed: u64, zero_init: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars,
                rng: ChaCha8Rng::seed_from_u64(seed),
                zero_init,
            })),
            device: Device::Cpu,
            _scalar: PhantomData,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<T> {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn scope(&self, name: &str) -> Scope<T> {
        self.root().pp(name)
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars().into_iter().filter(|(k, _)| k.starts_with(prefix)).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("param store poisoned").vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of scalar parameters, optionally restricted to a name prefix.
    pub fn num_params(&self, prefix: &str) -> usize {
        self.vars_with_prefix(prefix)
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars() {
            out.insert(name, var.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// Overwrites values in place; every name must already exist with the same shape.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().expect("param store poisoned");
        for (name, t) in values {
            let var = inner
                .vars
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            if var.as_tensor().dims() != t.dims() {
                return Err(Error::shape("ParamStore::assign", format!("{:?}", var.as_tensor().dims()), format!("{:?}", t.dims())));
            }
            var.set(&t.to_dtype(T::DTYPE)?)?;
        }
        Ok(())
    }

    fn get_or_create(&self, name: String, dims: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(var) = inner.vars.get(&name) {
            if var.as_tensor().dims() != dims {
                return Err(Error::ConfigMismatch {
                    field: name,
                    expected: format!("{dims:?}"),
                    found: format!("{:?}", var.as_tensor().dims()),
                });
            }
            return Ok(var.as_tensor().clone());
        }
        let n: usize = dims.iter().product();
        let values: Vec<T> = if inner.zero_init {
            vec![T::zero(); n]
        } else {
            let rng = &mut inner.rng;
            match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Uniform(b) => (0..n).map(|_| T::of(rng.random_range(-b..=b))).collect(),
                Init::Normal(std) => (0..n)
                    .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
                    .collect(),
                Init::FanIn(fan_in) => {
                    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-b..=b))).collect()
                }
            }
        };
        let var = Var::from_vec(values, dims, &self.device)?;
        let t = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(t)
    }
}

/// A dotted-name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<T: Real> {
    store: ParamStore<T>,
    prefix: String,
}

impl<T: Real> Scope<T> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_create(self.pp(name).prefix, dims, init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let a = ParamStore::<f32>::new(3);
        let b = ParamStore::<f32>::new(3);
        let ta = a.scope("x").get("w", &[4, 5], Init::FanIn(5)).unwrap();
        let tb = b.scope("x").get("w", &[4, 5], Init::FanIn(5)).unwrap();
        assert_eq!(ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(), tb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(a.vars()[0].0, "x.w");
    }

    #[test]
    fn reuse_and_shape_check() {
        let s = ParamStore::<f64>::new(0);
        let t1 = s.root().get("w", &[2, 2], Init::Ones).unwrap();
        let t2 = s.root().get("w", &[2, 2], Init::Zeros).unwrap();
        assert_eq!(t1.id(), t2.id());
        assert!(matches!(s.root().get("w", &[3], Init::Zeros), Err(Error::ConfigMismatch { .. })));
    }

    #[test]
    fn snapshot_assign_roundtrip() {
        let s = ParamStore::<f64>::new(1);
        let w = s.root().get("w", &[3], Init::Normal(1.0)).unwrap();
        let snap = s.snapshot().unwrap();
        let mut zeros = BTreeMap::new();
        zeros.insert("w".to_string(), Tensor::zeros(3, candle_core::DType::F64, &Device::Cpu).unwrap());
        s.assign(&zeros).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), vec![0.0; 3]);
        s.assign(&snap).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), snap["w"].to_vec1::<f64>().unwrap());
    }
}
