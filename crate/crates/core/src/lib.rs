//! Linear-quadratic optimal control of space-time fractional diffusion.
//!
//! The state equation `∂_t^γ u + (-Δ)^s u = f + z` on Ω = (0,1)^n with
//! homogeneous Dirichlet data is realized through the weighted extension
//! `-div(y^α ∇U) = 0` on the truncated cylinder Ω × (0, Y), whose trace
//! on Ω × {0} is the state. The extension is discretized with Q1 elements
//! on a tensor mesh that is uniform in Ω and graded towards y = 0; time is
//! discretized with backward Euler (γ = 1) or the L1 scheme (γ < 1).
//! Controls are piecewise constant in space and time with box bounds and
//! are optimized by a projected limited-memory BFGS method driven by the
//! exact discrete adjoint.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod control;
mod error;
pub mod evolution;
pub mod harness;
pub mod linalg;
pub mod mesh;
pub mod optimize;
pub mod oracle;
pub mod problem;
pub mod quadrature;

pub use error::{Error, Result};
