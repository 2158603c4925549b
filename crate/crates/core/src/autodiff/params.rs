use std::collections::HashMap;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// A named array owned by a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    /// Frozen entries (for example per-user statistics) are bound as
    /// constants and never touched by optimizers.
    pub learnable: bool,
}

/// Ordered collection of named arrays. Iteration order is insertion order,
/// which is also the serialization order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<F>,
        learnable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor,
            learnable,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].tensor)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].tensor),
            None => Err(Error::Invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries in learnable arrays.
    pub fn num_learnable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.learnable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// Copies every array into `graph` as a leaf. Learnable arrays require
    /// gradients only when `trainable` is set.
    pub fn bind(&self, graph: &mut Graph<F>, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.set_requires_grad(trainable && p.learnable);
                graph.leaf(t)
            })
            .collect();
        Bindings {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    learnable: p.learnable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for every array of a [`ParamStore`], by name or position.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("parameter {name} is not bound")))
    }

    /// Handle of the `i`-th parameter in store order.
    pub fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}
