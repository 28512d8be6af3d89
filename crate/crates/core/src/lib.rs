//! Numerical toolkit for a zero-sum stochastic differential game between a
//! major player and N minor agents, and for its mean-field limit.
//!
//! The crate is organised bottom-up: [`model`] holds the coefficients and run
//! configuration, [`forward`] simulates particle systems, [`hamiltonian`] and
//! [`limit`] solve the pointwise saddle problems, [`bsde`] contains the
//! backward solvers and [`experiments`] the convergence studies built on top.

pub mod bsde;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod forward;
pub mod hamiltonian;
pub mod limit;
pub mod model;
pub mod numeric;
pub mod quadrature;
pub mod regression;
pub mod rng;

pub use error::{Error, Result};
