use std::ops::Index;
use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Vec<f64>,
}

/// Named, ordered collection of learnable tensors.
///
/// Network modules register their weights here at construction and keep
/// only [`ParamId`]s; each forward pass binds the set onto a fresh tape.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape handles of a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            grad,
        });
        ParamId(self.params.len() - 1)
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Places every parameter on `tape`; `trainable = false` binds them as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(Arc::clone(&p.value), trainable))
                .collect(),
        }
    }

    /// Adds the tape's leaf gradients into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    fn check_same_tree(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self ← (1 − tau)·self + tau·online`, elementwise.
    pub fn polyak_update(&mut self, online: &ParamSet, tau: f64) -> Result<()> {
        self.check_same_tree(online)?;
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            let dst = Arc::make_mut(&mut t.value);
            for (x, &y) in dst.data_mut().iter_mut().zip(o.value.data()) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
        Ok(())
    }

    /// Overwrites every value with `other`'s (hard target sync).
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_same_tree(other)?;
        for (t, o) in self.params.iter_mut().zip(&other.params) {
            t.value = Arc::clone(&o.value);
        }
        Ok(())
    }
}
