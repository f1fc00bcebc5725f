//! Persistent trainable tensors and their per-forward binding to a tape.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which part of the network a weight belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Stem, cell preprocessing and classifier: used by every sub-graph.
    Shared,
    /// Weights of candidate operation `op` on `edge` of cell `cell`.
    EdgeOp { cell: usize, edge: usize, op: usize },
    /// Architecture logits.
    Arch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    /// `None` until a backward pass reaches the parameter.
    pub grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            group,
            value,
            grad: None,
        }
    }

    pub fn accumulate_grad(&mut self, g: Tensor<T>) {
        match self.grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => self.grad = Some(g),
        }
    }

    pub fn bind(&self, tape: &Tape<T>, requires_grad: bool) -> Var<T> {
        tape.leaf(self.value.clone(), requires_grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Leaves created from a [`ParamStore`] for one forward pass.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Bound<T> {
    /// Wraps caller-made leaves, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, param: Param<T>) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind(&self, tape: &Tape<T>, requires_grad: bool) -> Bound<T> {
        Bound {
            vars: self.params.iter().map(|p| p.bind(tape, requires_grad)).collect(),
        }
    }

    /// Moves gradients from the bound leaves into the store, adding to any
    /// gradient already held.
    pub fn absorb_grads(&mut self, bound: &Bound<T>) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = v.take_grad() {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
