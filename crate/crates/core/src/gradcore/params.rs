use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Registration order is the canonical order used by
/// the optimizer and by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Normal(0, std) initialised parameter.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(normal.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, S::of(value)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// True when both stores hold the same names, shapes and bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Gradient for every registered parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct GradientMap<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradientMap<S> {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self {
            grads: store.values.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect(),
        }
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor<S>) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> S {
        self.grads
            .iter()
            .flatten()
            .fold(S::zero(), |acc, g| acc + g.norm_sq())
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<S>>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.iter().zip(&other.grads).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            })
    }

    /// True when every entry of the given parameter's gradient is exactly zero.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id)
            .is_none_or(|g| g.data().iter().all(|x| *x == S::zero()))
    }
}
