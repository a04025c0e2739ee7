//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Learnable tensors addressed by unique hierarchical names such as
/// `entry.rgb.s1.weight`. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every parameter as a graph variable.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        self.bind_with(graph, true)
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bound {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.set_grad(None).expect("clearing a gradient cannot fail");
                let v = if trainable { graph.variable(t) } else { graph.constant(t) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from a backward pass into each tensor's grad slot.
    /// Parameters the output does not depend on receive zeros.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (name, tensor) in self.tensors.iter_mut() {
            let var = bound.get(name)?;
            let g = grads.get(var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
            tensor.set_grad(Some(g))?;
        }
        Ok(())
    }
}

/// Graph variables for each parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Deterministic initializer over a seeded ChaCha stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("non-negative std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut self.rng)))
    }

    /// He fan-in initialization for a `[Cout, Cin, kh, kw]` kernel or a
    /// `[out, in]` matrix.
    pub fn he<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }
}
