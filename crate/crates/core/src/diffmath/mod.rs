//! Minimal reverse-mode differentiation over dense rank-1/rank-2 tensors.
//!
//! A [`Tape`] records primitive operations in creation order. Every input
//! tensor enters as a leaf; [`Tape::backward`] walks the recorded ops once in
//! reverse and returns the gradient of a scalar loss with respect to every
//! leaf. Leaves with no path to the loss get exact zeros.
//!
//! Broadcasting is limited to adding a row vector to every row of a matrix
//! ([`Prim::AddRow`]); anything else (column broadcasts, slicing) is built
//! from `matmul` against constant selector matrices.

mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Prim, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("{op}: non-finite gradient")]
    NonFiniteGradient { op: &'static str },
    #[error("backward: loss must be scalar-shaped, got {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor rank {} unsupported (max 2): {shape:?}", shape.len())]
    Rank { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
}
