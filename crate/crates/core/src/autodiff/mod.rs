//! Deterministic reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive operations in topological order. Values are
//! computed by [`Graph::forward`] once every input is bound, and
//! [`Graph::backward`] accumulates gradients in a fixed (descending node id)
//! order so identical inputs always produce bitwise identical gradients.
//! [`Graph::stop_gradient`] is the identity in the forward pass and blocks all
//! gradient flow backwards; nodes only reachable through such a barrier get no
//! gradient entry at all.

mod graph;
mod tensor;

pub use graph::{GradientMap, Graph, NodeId, Op};
pub use tensor::{ulp_distance, Tensor};
