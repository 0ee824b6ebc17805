use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Gradients, Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
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

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::squared_norm).sum()
    }

    /// Glorot-uniform weight `[fan_in × fan_out]` and zero bias `[1 × fan_out]`.
    pub(crate) fn add_linear(&mut self, rng: &mut impl rand::Rng, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.w"), glorot_uniform(rng, fan_in, fan_out));
        self.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect() }
    }

    /// Checks that `other` holds the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::validation("params", "parameter sets differ in size"));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::validation(format!("params.{ka}"), "name or shape mismatch"));
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    #[cfg(test)]
    pub(crate) fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::precondition("parameter lookup", format!("no parameter named {name}")))
    }

    /// Collects the gradient of each parameter, keyed by name.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }
}
