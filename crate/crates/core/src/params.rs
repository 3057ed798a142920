//! Named, ordered parameter storage shared by every model kind.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::Array;
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ConvKernel;

/// How a parameter is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    HeNormal { fan_in: usize },
    Constant(f64),
}

/// Shape and role of one stored array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Buffers (batch-norm running statistics) are stored and checkpointed
    /// but never trained or counted.
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Trainable scalars in a list of specs.
pub fn count_trainable(specs: &[ParamSpec]) -> usize {
    specs.iter().filter(|s| s.trainable).map(ParamSpec::numel).sum()
}

/// Ordered name-to-array map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Allocates and initializes every spec in order.
    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for s in specs {
            let n = s.numel();
            let data = match s.init {
                Init::HeNormal { fan_in } => {
                    let std = T::lit((2.0 / fan_in.max(1) as f64).sqrt());
                    (0..n).map(|_| std * T::sample_normal(rng)).collect()
                }
                Init::Constant(c) => vec![T::lit(c); n],
            };
            store.insert(&s.name, Array::new(s.shape.clone(), data)?, s.trainable)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Array<T>, trainable: bool) -> Result<()> {
        contract(!self.index.contains_key(name), || format!("duplicate parameter {name}"))?;
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::Contract(format!("no parameter named {name}"))),
        }
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        let shape = slot.shape().to_vec();
        *slot = Array::new(shape, data)?;
        Ok(())
    }

    /// The convolution stored as `{prefix}.w` (shape `[out, in, t, t]`)
    /// with its bias `{prefix}.b` when present.
    pub fn kernel(&self, prefix: &str) -> Result<ConvKernel<T>> {
        let w = self.get(&format!("{prefix}.w"))?;
        let s = w.shape();
        contract(s.len() == 4 && s[2] == s[3] && s[2] % 2 == 1, || {
            format!("{prefix}.w has shape {s:?}, not a square odd kernel")
        })?;
        let bias = match self.get(&format!("{prefix}.b")) {
            Ok(b) => Some(b.data().to_vec()),
            Err(_) => None,
        };
        ConvKernel::new(s[2] / 2, s[1], s[0], w.data().to_vec(), bias)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|&i| self.trainable[i])
    }

    /// `(name, value, trainable)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((n, v), &t)| (n.as_str(), v, t))
    }

    /// Trainable `(name, value)` pairs in insertion order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.iter().filter(|(_, _, t)| *t).map(|(n, v, _)| (n, v))
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, v)| v.len()).sum()
    }

    /// Copies values from `other` by name; every stored name must be present
    /// there with the same shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other.get(name)?;
            contract(src.shape() == value.shape(), || {
                format!("{name}: stored shape {:?}, loaded {:?}", value.shape(), src.shape())
            })?;
            *value = src.clone();
        }
        Ok(())
    }
}
