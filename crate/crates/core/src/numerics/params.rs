use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor, Var};

/// Named model parameters, iterated in path order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S> {
    tensors: BTreeMap<String, Tensor<S>>,
    /// Optimizer steps applied so far.
    pub step: u64,
}

impl<S: Scalar> Default for ParameterSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            step: 0,
        }
    }

    /// Adds a parameter; paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::InvalidArgument(format!("duplicate parameter path {path}")));
        }
        self.tensors.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<S>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on the tape as a named parameter leaf.
    pub fn attach(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(k, t.clone())))
                .collect(),
        )
    }

    /// Registers every tensor as a constant (no gradients recorded).
    pub fn attach_frozen(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        )
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            step: self.step,
        }
    }

    /// Checks that every path and shape matches `other`.
    pub fn check_same_layout(&self, other: &ParameterSet<S>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, ta), (kb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || ta.shape() != tb.shape() {
                return Err(Error::Shape(format!(
                    "parameter {ka} {:?} vs {kb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameter path to tape variable, produced by [`ParameterSet::attach`].
#[derive(Debug, Clone, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound(pairs.into_iter().collect())
    }

    /// Variable for `path`; a missing path is a programming error.
    pub fn get(&self, path: &str) -> Var {
        match self.0.get(path) {
            Some(v) => *v,
            None => panic!("unbound parameter {path}"),
        }
    }

    pub fn contains(&self, path: &str) -> bool {
        self.0.contains_key(path)
    }
}

impl std::ops::Index<&str> for Bound {
    type Output = Var;

    fn index(&self, path: &str) -> &Var {
        self.0.get(path).unwrap_or_else(|| panic!("unbound parameter {path}"))
    }
}
