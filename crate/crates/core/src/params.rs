//! Named parameter storage, declaration, initialization and checksums.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot uniform over `(fan_in, fan_out) = (rows, cols)`.
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Declaration of one parameter a module expects.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn sample<T: Real>(&self, rng: &mut impl Rng) -> Mat<T> {
        let (rows, cols) = self.shape;
        match self.init {
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_fn(rows, cols, |_, _| T::cst(rng.random_range(-bound..bound)))
            }
            Init::Normal(std) => {
                let n = Normal::new(0.0, std).expect("finite std");
                Mat::from_fn(rows, cols, |_, _| T::cst(n.sample(rng)))
            }
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Ones => Mat::filled(rows, cols, T::one()),
            Init::Const(v) => Mat::filled(rows, cols, T::cst(v)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Arc<Mat<T>>,
    pub frozen: bool,
}

/// Ordered map of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    /// Samples every declared parameter in declaration order from `rng`.
    pub fn initialize(specs: &[ParamSpec], rng: &mut impl Rng, frozen: bool) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.insert(&spec.name, spec.sample(rng), frozen);
        }
        store
    }

    /// Builds a store from raw arrays, checking every declared name and shape.
    pub fn from_arrays(
        specs: &[ParamSpec],
        arrays: &BTreeMap<String, Mat<T>>,
        frozen: bool,
    ) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let m = arrays
                .get(&spec.name)
                .ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
            if m.shape() != spec.shape {
                return Err(Error::ParameterShape {
                    name: spec.name.clone(),
                    expected: vec![spec.shape.0, spec.shape.1],
                    found: vec![m.rows(), m.cols()],
                });
            }
            store.insert(&spec.name, m.clone(), frozen);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Mat<T>, frozen: bool) {
        self.params.insert(
            name.to_string(),
            Param {
                value: Arc::new(value),
                frozen,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Mat<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces a value, keeping the frozen flag.
    pub fn set(&mut self, name: &str, value: Mat<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: vec![p.value.rows(), p.value.cols()],
                found: vec![value.rows(), value.cols()],
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Mat<T>> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(Arc::make_mut(&mut p.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    pub fn to_arrays(&self) -> BTreeMap<String, Mat<T>> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), (*p.value).clone()))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    /// Checksum restricted to parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        self.checksum_where(|n| n.starts_with(prefix))
    }

    fn checksum_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| keep(n)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            h.update(T::to_le_bytes_vec(p.value.data()));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
