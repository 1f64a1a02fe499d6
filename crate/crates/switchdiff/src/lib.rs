//! Switching diffusions: simulation and large-deviation analysis.
//!
//! This crate implements the numerical side of slow-fast diffusions whose
//! drift is modulated by a rapidly switching Markov mode: exact-in-law
//! simulation with exit detection, the Hamiltonian/Legendre machinery of
//! the joint sample-path and occupation large deviation principle,
//! quasipotentials and exit-location prediction, and the associated
//! Dirichlet boundary value problems.
//!
//! Entry points:
//! * [`model`]: model configuration, builtin examples, validation;
//! * [`switching`]: mode-chain generator, invariant weights, averaged flow;
//! * [`sim`]: Euler-Maruyama simulation with thinned switching, exit
//!   statistics, likelihood ratios against scheduled reference rates;
//! * [`ldp`]: Hamiltonian principal eigenvalue, rate functions, action
//!   functionals, invariant verification;
//! * [`quasipotential`]: path-space action minimization and exit profiles;
//! * [`dirichlet`]: finite-difference solver for the coupled boundary
//!   value systems and its Monte Carlo counterpart.
//!
//! The `parallel` feature (on by default) runs batch loops on rayon;
//! results are bit-identical to the sequential fallback.

// Validation guards are written `!(x > 0.0)` rather than `x <= 0.0` so that
// NaN fails closed; keep clippy from suggesting the NaN-accepting form.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod expr;
pub mod ldp;
pub mod model;
pub mod dirichlet;
pub mod quasipotential;
pub mod rng;
pub mod sim;
pub mod switching;

pub use error::{Error, Result};
