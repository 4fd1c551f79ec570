//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is tape based: a [`Graph`] records every operation applied to
//! its [`Var`]s, and [`Graph::backward`] walks the tape in reverse to produce
//! [`Gradients`]. Learnable tensors live in a [`ParamStore`] keyed by
//! hierarchical names (`component/layer/param`); a graph reads a parameter
//! the first time it is referenced and tracks its gradient under that name.
//!
//! Everything runs single-threaded in a fixed order, so results are
//! bit-reproducible for identical inputs.

mod graph;
mod kernels;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Shape, Tensor, TensorError};
