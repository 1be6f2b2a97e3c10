use std::collections::HashMap;

use super::{Graph, Tensor};
use crate::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.set_grad(None);
        }
    }

    /// Adds the gradients of every parameter bound into `graph` to the
    /// parameters' own gradient slots.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        let mut bound: Vec<_> = graph.bound_params().collect();
        bound.sort();
        for (id, var) in bound {
            if let Some(g) = graph.grad(var) {
                self.add_grad(id, g);
            }
        }
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let t = &mut self.tensors[id.0];
        let n = t.numel();
        match t.grad_mut() {
            Some(slot) => {
                for (o, d) in slot.iter_mut().zip(g) {
                    *o += d;
                }
            }
            None => {
                debug_assert_eq!(g.len(), n);
                t.set_grad(Some(g.to_vec()));
            }
        }
    }

    /// Flattened gradient of every parameter, zeros where none was recorded.
    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }
}

/// Anything that owns a [`ParamStore`].
pub trait Parameterized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Parameterized for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}
