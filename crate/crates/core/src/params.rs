//! Named trainable tensors and their binding onto a tape.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered collection of every trainable tensor in a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bindings {
    /// One variable per parameter, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }

    /// Routes a parameter through a different tape variable.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.0[id.0] = var;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(NamedParam {
            name: name.into(),
            value: value.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.param(&p.value)).collect())
    }

    /// Adds the tape gradients of every bound parameter into its `grad`.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &mut Gradients) -> Result<()> {
        for (param, var) in self.params.iter_mut().zip(&bindings.0) {
            let g = grads.take(*var).ok_or_else(|| {
                Error::Contract(format!("no gradient recorded for parameter {}", param.name))
            })?;
            param.value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Replaces parameter values with `other`'s, requiring identical names
    /// and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone().with_requires_grad(true);
        }
        Ok(())
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual fully connected layer
/// initialisation.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Weight `[out, in]` and bias `[out]` for a fully connected layer.
pub fn add_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> (ParamId, ParamId) {
    let w = store.add(
        format!("{name}.weight"),
        fan_in_uniform(rng, &[d_out, d_in], d_in),
    );
    let b = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[d_out], d_in));
    (w, b)
}
