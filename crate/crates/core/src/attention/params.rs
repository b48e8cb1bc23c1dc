use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Gradients, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors. Layers hold [`ParamId`]s
/// into it; the order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a store, from one bind call.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn replace(&mut self, id: ParamId, mut tensor: Tensor) {
        tensor.set_requires_grad(true);
        self.tensors[id.0] = tensor;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<_>>()
            .map(Bound)
    }

    /// Records every parameter as a constant (inference, frozen models).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<_>>()
            .map(Bound)
    }

    /// Copies the gradients of a backward sweep into each parameter's grad slot.
    pub fn absorb(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (k, t) in self.tensors.iter_mut().enumerate() {
            let g = grads.get_or_zeros(bound.0[k], t).into_data();
            t.set_grad(Some(g))?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.take_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("buffer sized from shape")
}

/// Glorot-normal weight matrix, `std = sqrt(2 / (fan_in + fan_out))`.
pub fn xavier_tensor<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    normal_tensor(rng, &[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt())
}
