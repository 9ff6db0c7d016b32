//! Named parameter storage and the two layer types built on it.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces the values of a parameter, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::dim(
                "ParamStore::set",
                format!(
                    "{} expects {:?}, got {:?}",
                    self.names[id.0],
                    slot.shape(),
                    value.shape()
                ),
            ));
        }
        let dtype = slot.dtype();
        *slot = value.to_dtype(dtype);
        slot.set_requires_grad(true);
        Ok(())
    }

    pub fn to_dtype(&mut self, dtype: DType) {
        for t in &mut self.tensors {
            let mut converted = std::mem::replace(t, Tensor::scalar(0.0)).to_dtype(dtype);
            converted.set_requires_grad(true);
            *t = converted;
        }
    }

    /// Records every parameter as a tracked leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Adds the gradients of one backward pass into each parameter's buffer.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound<'_>) -> Result<()> {
        for (tensor, &var) in self.tensors.iter_mut().zip(&bound.vars) {
            grads.accumulate(var, tensor)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Plain gradient descent: `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, lr: f64) {
        for t in &mut self.tensors {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let dtype = t.dtype();
            for (v, g) in t.data_mut().iter_mut().zip(&grad) {
                *v -= lr * g;
                if dtype == DType::F32 {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

/// Parameter leaves recorded on one tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Seeded initializer shared by every module constructor.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-uniform `fan_in×fan_out` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::from_vec(&[fan_in, fan_out], data).expect("non-empty shape")
    }
}

/// Affine map applied to each row: `x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let cols = x.shape();
        if cols.len() != 2 || cols[1] != self.in_dim {
            return Err(Error::dim(
                "linear",
                format!("input {cols:?} for a {}→{} map", self.in_dim, self.out_dim),
            ));
        }
        x.matmul(p[self.weight])?.add_row(p[self.bias])
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        x.layer_norm(LAYER_NORM_EPS)?
            .mul_row(p[self.gamma])?
            .add_row(p[self.beta])
    }
}
