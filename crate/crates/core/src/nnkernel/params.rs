use crate::error::{Error, Result};
use crate::nnkernel::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub weight: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    pub lr_mult: f64,
}

impl ParamEntry {
    pub fn new(name: impl Into<String>, weight: Tensor) -> Self {
        let grad = Tensor::zeros(weight.shape());
        let momentum = Tensor::zeros(weight.shape());
        ParamEntry { name: name.into(), weight, grad, momentum, lr_mult: 1.0 }
    }
}

/// Ordered collection of trainable tensors with their optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: ParamEntry) -> Result<()> {
        if self.index_of(&entry.name).is_some() {
            return Err(Error::Validation(format!("duplicate parameter name `{}`", entry.name)));
        }
        let s = entry.weight.shape();
        if entry.grad.shape() != s || entry.momentum.shape() != s {
            return Err(Error::Shape(format!(
                "parameter `{}`: weight {:?}, grad {:?}, momentum {:?}",
                entry.name,
                s,
                entry.grad.shape(),
                entry.momentum.shape()
            )));
        }
        if !(entry.lr_mult >= 0.0 && entry.lr_mult.is_finite()) {
            return Err(Error::Validation(format!(
                "parameter `{}` has invalid lr_mult {}",
                entry.name, entry.lr_mult
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.weight.len()).sum()
    }
}
