//! Named parameter tensors.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// An ordered collection of named tensors. Order is part of the identity:
/// it fixes the checkpoint layout and the initialization stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn push_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
    ) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound));
        self.push(name, value)
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> usize {
        self.push(name, Mat::zeros(shape))
    }

    pub fn push_ones(&mut self, name: impl Into<String>, shape: (usize, usize)) -> usize {
        self.push(name, Mat::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.params[idx].value
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Zero tensors with the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.params
            .iter()
            .map(|p| Mat::zeros(p.value.raw_dim()))
            .collect()
    }

    /// Sets every tensor to zero. Used by tests for degenerate-model contracts.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.fill(0.0);
        }
    }
}

/// A parameter set bound to a tape slot.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub slot: u8,
    pub set: &'a ParamSet,
}

impl<'a> Binder<'a> {
    pub fn new(slot: u8, set: &'a ParamSet) -> Self {
        Self { slot, set }
    }

    pub fn bind(&self, tape: &mut Tape, idx: usize) -> Var {
        tape.bind((self.slot, idx), self.set.get(idx))
    }
}

/// Adds the gradients collected on `tape` for `slot` into `acc`, scaled by `weight`.
pub fn accumulate_grads(tape: &Tape, slot: u8, acc: &mut [Mat], weight: f64) {
    for ((s, idx), grad) in tape.param_grads() {
        if s != slot {
            continue;
        }
        if let Some(g) = grad {
            acc[idx].scaled_add(weight, g);
        }
    }
}

