//! Named parameter storage and per-graph binding.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use melrof_autograd::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Ordered map from parameter name to tensor. Insertion order is the
/// canonical order used by checkpoints and parameter counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|t| t.as_ref())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| CoreError::Shape(format!("missing parameter {name}")))
    }

    /// Copy-on-write access; cheap when no graph still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| pred(n)).map(|(_, t)| t.len()).sum()
    }

    /// Removes every parameter whose name satisfies `pred`, keeping order.
    pub fn remove_matching(&mut self, pred: impl Fn(&str) -> bool) {
        self.entries.retain(|k, _| !pred(k));
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Registers every parameter as a graph leaf; trainable when `trainable(name)`.
    pub fn bind(&self, g: &Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Shape(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight of shape `(fan_in, fan_out)`.
pub(crate) fn linear_weight<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.random_range(-bound..bound)))
}

pub(crate) fn linear_bias<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_out], |_| T::of(rng.random_range(-bound..bound)))
}

pub(crate) fn ones<T: Real>(n: usize) -> Tensor<T> {
    Tensor::full(&[n], T::one())
}
