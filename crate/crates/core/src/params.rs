//! Named parameter storage and weight initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of named model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Scalars in tensors whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    /// Drops every tensor registered after the first `len`; earlier ids stay valid.
    pub fn truncate(&mut self, len: usize) {
        for e in self.entries.drain(len.min(self.entries.len())..) {
            self.by_name.remove(&e.name);
        }
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::dim("ParamStore::set", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    GlorotUniform,
    /// Normal with std sqrt(2 / fan_in).
    HeNormal,
}

impl Init {
    /// Draws a tensor of `shape`. For rank ≥ 2 the fans are
    /// `fan_out = shape[0]·receptive` and `fan_in = shape[1]·receptive`.
    pub fn sample<T: Scalar, R: Rng>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let (fan_in, fan_out) = fans(shape);
        let n: usize = shape.iter().product();
        let data: Vec<T> = match self {
            Init::GlorotUniform => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
            Init::HeNormal => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
        };
        Tensor::new(shape, data).expect("shape matches sample count")
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0].max(1), shape[0].max(1)),
        _ => {
            let receptive: usize = shape[2..].iter().product();
            ((shape[1] * receptive).max(1), (shape[0] * receptive).max(1))
        }
    }
}
