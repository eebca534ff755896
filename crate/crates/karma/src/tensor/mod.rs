//! Dense f32 tensors, a reverse-mode autodiff graph, and an AdamW optimizer.
//!
//! Tensors are immutable row-major buffers. Computation happens on a
//! [`Graph`]: every op evaluates eagerly on insertion and records the
//! backward rule needed to propagate gradients to named parameter leaves.
//! Any op that would produce a NaN/Inf fails with a structured error
//! instead of letting the value escape.

mod adamw;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use adamw::{adamw_step, AdamWState};
pub use graph::{Gradients, Graph, NodeId};

use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {dims:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        dims: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("backward requires a scalar loss node, got shape {dims:?}")]
    NonScalarLoss { dims: Vec<usize> },

    #[error("shape {dims:?} implies {expected} elements, buffer holds {actual}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },
}

/// Dense row-major f32 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: data.len(),
                dims,
            });
        }
        let t = Tensor { dims, data };
        t.assert_finite("new")?;
        Ok(t)
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// I.i.d. uniform values in `[-scale, scale]`.
    pub fn uniform<R: rand::Rng>(dims: Vec<usize>, scale: f32, rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f32, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarLoss {
                dims: self.dims.clone(),
            })
        }
    }

    pub(crate) fn assert_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Named parameter set shared by models, the optimizer, and checkpoints.
///
/// Iteration order is name order, which keeps optimizer updates and
/// serialized checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params.get(name).ok_or_else(|| TensorError::UnknownParam {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam {
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}
