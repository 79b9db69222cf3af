//! Differentiation engine.
//!
//! [`dual`] provides forward-mode duals for Jacobians of model code written
//! against the [`Real`] trait. [`graph`] is a batched reverse-mode tape whose
//! dual-row primitives carry input tangents, giving parameter gradients of
//! losses that contain input Jacobians (forward-over-reverse nesting).

pub mod dual;
pub mod graph;
pub mod params;

pub use dual::{
    central_difference, directional_derivative, input_jacobian, Dual, Real, MAX_TANGENTS,
};
pub use graph::{sigmoid, softplus, softplus_inv, Gradients, Graph, Shape, Var};
pub use params::{ParamVector, TensorSlot};
