//! MAP (penalized least-squares) estimation for PDE-constrained regression
//! with random design.
//!
//! The crate covers the whole pipeline: finite-difference forward solvers for
//! the Darcy and stationary Schrödinger problems, a softplus link onto
//! coefficients bounded below, adjoint-state gradients, an L-BFGS MAP
//! estimator over a sine-basis sieve, Feynman–Kac Monte Carlo oracles, and
//! replication campaigns that measure convergence rates.

pub mod error;
pub mod estimator;
pub mod experiments;
pub mod fnspace;
pub mod linalg;
pub mod link;
pub mod mc_oracle;
pub mod model;
pub mod optim;
pub mod pde;
pub mod probes;
pub mod rng;

pub use error::{Error, Result};
