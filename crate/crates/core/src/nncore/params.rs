use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor, returning its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Insert every tensor into `g` as a trainable leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    /// Copy gradients from a finished backward pass into the tensors.
    /// Parameters the loss never touched get an all-zero gradient.
    pub fn collect_grads(&mut self, g: &Graph, bound: &[NodeId]) -> Result<()> {
        if bound.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "{} bound nodes for {} parameters",
                bound.len(),
                self.tensors.len()
            )));
        }
        for (t, &id) in self.tensors.iter_mut().zip(bound) {
            let grad = g
                .grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(grad)?;
        }
        Ok(())
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, (name, dst)) in self.names.iter().zip(&self.tensors).enumerate() {
            let Some(src) = other.tensors.get(i) else {
                return Err(Error::Checkpoint(format!(
                    "parameter count mismatch: expected {}, found {} (first missing: {name})",
                    self.len(),
                    other.len()
                )));
            };
            if &other.names[i] != name {
                return Err(Error::Checkpoint(format!(
                    "parameter name mismatch at position {i}: expected {name}, found {}",
                    other.names[i]
                )));
            }
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
