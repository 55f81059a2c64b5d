//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Learnable tensors keyed by hierarchical dotted names, kept sorted.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

/// Parameter names mapped to their leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    map: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to leaves that already exist on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Collects the gradient of every bound parameter, zero where the loss
    /// does not depend on it.
    pub fn gradients<S: Scalar>(
        &self,
        tape: &Tape<S>,
        grads: &mut Gradients<S>,
    ) -> ParamStore<S> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, &v)| {
                    let g = grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                    (k.clone(), g)
                })
                .collect(),
        }
    }
}

/// He-normal draw for a convolution kernel `[Cout, Cin, kd, kh, kw]`.
pub fn he_normal<S: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| S::of(normal.sample(rng)))
}

/// Joins a prefix and a leaf name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers `{prefix}.weight` (He-normal) and `{prefix}.bias` (zeros).
pub fn init_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(join(prefix, "weight"), he_normal(&[cout, cin, k, k, k], rng))?;
    store.insert(join(prefix, "bias"), Tensor::zeros(&[cout]))
}

/// Registers `{prefix}.scale` (ones) and `{prefix}.shift` (zeros).
pub fn init_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) -> Result<()> {
    store.insert(join(prefix, "scale"), Tensor::ones(&[c]))?;
    store.insert(join(prefix, "shift"), Tensor::zeros(&[c]))
}

pub fn conv_params(cout: usize, cin: usize, k: usize) -> usize {
    cout * cin * k * k * k + cout
}
