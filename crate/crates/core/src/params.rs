//! Named, ordered trainable tensors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Parameters in insertion order. Iteration order never depends on hashing,
/// so serialisation is stable across runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::ParamMismatch(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].grad)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }
}

/// Parameters placed on a tape for one forward pass.
#[derive(Debug)]
pub struct BoundParams<'a> {
    store: &'a ParameterStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> BoundParams<'a> {
    /// Parameters enter the tape lazily as `variable`s (or `constant`s when
    /// `trainable` is false) the first time a block asks for them.
    pub fn new(store: &'a ParameterStore, trainable: bool) -> Self {
        BoundParams { store, vars: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    /// Fetch `name` with an expected shape, recording it on `tape` once.
    pub fn get(&mut self, tape: &mut Tape, name: &str, shape: &[usize]) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter {name:?}")))?;
        let value = &self.store.entries[i].value;
        if value.shape() != shape {
            return Err(Error::ParamMismatch(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                value.shape(),
                shape
            )));
        }
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let v = if self.trainable {
            tape.variable(value.clone())
        } else {
            tape.constant(value.clone())
        };
        self.vars[i] = Some(v);
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.store.position(name).and_then(|i| self.vars[i])
    }

    /// Release the borrow of the store, keeping the name-to-node mapping.
    pub fn into_binding(self) -> Binding {
        Binding { vars: self.vars }
    }
}

/// Mapping from store positions to tape nodes, detached from the store.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    /// Copy gradients into a store with the same layout. Parameters that were
    /// unused or unreachable receive zeros.
    pub fn write_grads(&self, grads: &Gradients, target: &mut ParameterStore) -> Result<()> {
        if target.len() != self.vars.len() {
            return Err(Error::ParamMismatch("store layout changed between bind and write".into()));
        }
        for (entry, var) in target.entries.iter_mut().zip(&self.vars) {
            match var.and_then(|v| grads.get(v)) {
                Some(g) => entry.grad.data_mut().copy_from_slice(g.data()),
                None => entry.grad.data_mut().fill(0.0),
            }
        }
        Ok(())
    }
}
