//! Layers used by the generator and discriminator: dense, convolution,
//! (conditional) batch normalization, spectral normalization, embedding.

mod layers;
mod norm;
mod spectral;

pub use layers::{Conv2d, Dense, Embedding, SnLayer};
pub use norm::{
    BatchNorm, BatchNormState, ConditionalAffineSource, ConditionalBatchNorm, BN_EPS, BN_MOMENTUM,
};
pub use spectral::{SpectralNormState, SIGMA_FLOOR};

use std::collections::HashMap;
use std::ops::Index;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameters of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// Tape variables for every parameter of a store, created by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Binds parameters to existing tape variables, in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding(vars)
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Spec(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        Binding(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        )
    }

    /// Overwrites each parameter's `grad` with its gradient from `grads`.
    pub fn store_grads(&mut self, bind: &Binding, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bind.0) {
            p.grad = grads.wrt(v);
        }
    }
}

/// Named mutable state that is not trained by gradient descent (BN running
/// statistics, SN singular-vector estimates).
pub struct Buffer<'a, T> {
    pub name: String,
    pub data: &'a mut Vec<T>,
}

impl<'a, T> Buffer<'a, T> {
    pub fn new(name: String, data: &'a mut Vec<T>) -> Self {
        Self { name, data }
    }
}

/// Forward-pass context shared by all layers.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    /// Batch statistics (train) or running statistics (eval) in BN.
    pub train: bool,
    /// Whether BN running statistics and SN power iterations advance.
    pub update_state: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn train(tape: &'a mut Tape<T>) -> Self {
        Self {
            tape,
            train: true,
            update_state: true,
        }
    }

    pub fn eval(tape: &'a mut Tape<T>) -> Self {
        Self {
            tape,
            train: false,
            update_state: false,
        }
    }

    /// Train-mode statistics without mutating any layer state; used by
    /// finite-difference checks, which need a pure forward.
    pub fn frozen(tape: &'a mut Tape<T>) -> Self {
        Self {
            tape,
            train: true,
            update_state: false,
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    GlorotUniform,
    Normal(f64),
    Zeros,
}

impl Init {
    pub fn tensor<T: Real>(
        self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut CounterRng,
    ) -> Tensor<T> {
        match self {
            Init::GlorotUniform => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.uniform_range(-limit, limit)))
            }
            Init::Normal(std) => Tensor::from_fn(shape, |_| T::of(std * rng.normal())),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// `x·W + bias` for `x: [b, din]`, `W: [din, dout]`.
pub fn dense<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => tape.add_row_bias(y, b),
        None => Ok(y),
    }
}

/// Row lookup of class embeddings.
pub fn embed_label<T: Real>(tape: &mut Tape<T>, labels: &[usize], table: Var) -> Result<Var> {
    tape.gather_rows(table, labels)
}
