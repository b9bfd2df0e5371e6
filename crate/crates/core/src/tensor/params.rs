use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Name → graph handle for one forward pass.
pub type Bindings = BTreeMap<String, Var>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors
            .insert(name.into(), t.with_requires_grad(true));
    }

    /// Weights uniform in `±1/sqrt(fan_in)`.
    pub fn insert_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.insert(name, t);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract("params", format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract("params", format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t)))
            .collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bindings {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t)))
            .collect()
    }

    /// Adds the gradients computed on `g` into each parameter's buffer.
    pub fn accumulate_grads(&mut self, g: &Graph, bindings: &Bindings) -> Result<()> {
        for (name, &var) in bindings {
            let t = self.get_mut(name)?;
            match g.grad(var) {
                Some(grad) => t.accumulate_grad(grad)?,
                None => t.accumulate_grad(&vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Releases every gradient buffer, leaving only values.
    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }
}
