//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they execute (values are computed
//! eagerly); [`Graph::backward`] then walks the tape in reverse to produce
//! exact gradients. Parameters live in a [`VarStore`] and are materialised
//! into a graph with [`Graph::param`], which caches per-variable nodes so a
//! weight used twice accumulates both contributions.
//!
//! The operation set is deliberately small: dense matmul, strided
//! convolution and its transpose, the activations and row-wise softmax /
//! layer-norm family, shape plumbing (concat / slice / reshape), reductions,
//! stop-gradient, and a straight-through categorical sampler. Everything a
//! recurrent world model and its actor-critic need — nothing more.

pub mod adam;
pub mod check;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod store;
pub mod tensor;

pub use adam::Adam;
pub use graph::{Gradients, Graph, NodeId};
pub use store::{VarId, VarStore};
pub use tensor::Tensor;
