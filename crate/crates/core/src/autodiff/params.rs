use std::collections::HashMap;

use super::graph::{Gradients, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered collection of named parameters. Order is insertion order and is
/// what the optimizer and the checkpoint writer iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i].value = value;
            return i;
        }
        let i = self.params.len();
        self.index.insert(name.clone(), i);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        i
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.params[i].value)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i].value),
            None => Err(Error::UnknownName(name.to_string())),
        }
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape. Frozen parameters become
    /// constants, so no gradient is computed for them.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), !p.frozen))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            ids,
            index: self.index.clone(),
        })
    }

    /// Zero-filled accumulator shaped like this set.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    }
}

/// Node ids of a [`ParamSet`] bound onto one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Adds this sweep's gradients into `acc` (same order as the set).
    pub fn accumulate(&self, grads: &Gradients, acc: &mut [Tensor]) {
        for (id, a) in self.ids.iter().zip(acc.iter_mut()) {
            if let Some(g) = grads.get(*id) {
                a.add_assign(g);
            }
        }
    }
}
