//! Finite-horizon linear-quadratic optimal control for linear evolution
//! equations with finite memory,
//!
//! ```text
//! w'(t) = A w(t) + ∫_0^t K(t-s) w(s) ds + B u(t),
//! J(u)  = ∫_τ^T ⟨Q w, w⟩ + |u|² dt,
//! ```
//!
//! solved two ways: the open-loop normal equations in discretized control
//! space ([`openloop`]), and the closed-loop synthesis through the coupled
//! Riccati system for the cost operators `P0(t)`, `P1(t,s)`, `P2(t,s,q)`
//! ([`riccati`], [`closedloop`]). The [`synthesis`] module rebuilds the same
//! cost operators directly from their integral definitions so every route
//! can be cross-checked against the others.
//!
//! All quadratures are composite trapezoid rules on a uniform grid; the
//! memory convolution is evaluated with the same rule.

pub mod cli;
pub mod closedloop;
pub mod dump;
mod error;
pub mod linalg;
pub mod model;
pub mod openloop;
pub mod propagator;
pub mod riccati;
pub mod stepping;
pub mod synthesis;
pub mod verify;

pub use error::{Error, Result};
pub use model::{InitialData, MemoryKernel, ProblemInstance, TimeGrid, Tolerances};
