use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles of a registered [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidArgument("parameter name must be non-empty".into()));
        }
        if self.tensors.insert(name.clone(), t).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let vars = self.tensors.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad))).collect();
        ParamVars { vars }
    }

    /// Replaces values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in self.tensors.iter_mut() {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(Error::ShapeMismatch { left: t.shape().to_vec(), right: src.shape().to_vec() });
            }
            *t = src.clone();
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Same handles with `name` pointing at `v` instead.
    pub fn with_override(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    /// Accumulated gradients keyed by parameter name.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let g = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros_like(tape.value(*v)));
                (n.clone(), g)
            })
            .collect()
    }
}
