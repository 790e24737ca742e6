use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Record every parameter on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Record every parameter as a constant (inference).
    pub fn register_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Move gradients out of `grads` into each parameter's grad slot.
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn absorb_grads(&mut self, vars: &[Var], grads: &mut Gradients) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::usage(format!(
                "{} tape handles for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            let g = grads.take(*v).unwrap_or_else(|| vec![0.0; t.len()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut problems = Vec::new();
        if named.len() != self.tensors.len() {
            problems.push(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            ));
        }
        for (name, t) in named {
            match self.id(name) {
                None => problems.push(format!("unexpected parameter `{name}`")),
                Some(id) if self.get(id).shape() != t.shape() => problems.push(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.get(id).shape()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        for (name, t) in named {
            let id = self.id(name).expect("checked above");
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}
