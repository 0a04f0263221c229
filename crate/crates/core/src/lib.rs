//! Covariate-balancing weights and treatment-effect estimation.
//!
//! The crate bundles four weighting methods (inverse probability of treatment
//! weighting, energy balancing, kernel optimal matching and tailored-loss
//! propensity scores), three effect estimators (weighted average, augmented
//! weighted average and weighted least squares with sandwich intervals), and a
//! Monte Carlo harness that runs them over a grid of simulated scenarios.
//!
//! Modules, bottom-up:
//!
//! * [`scenario`]: the simulation grid and the data-generating mechanism.
//! * [`learners`]: logistic regression by IRLS and oracle nuisance learners.
//! * [`qp`]: kernels, distance matrices and the constrained QP solver.
//! * [`balancers`]: the four weighting methods.
//! * [`estimators`]: WA, AWA and weighted OLS with HC0 intervals.
//! * [`harness`]: replication runner, metrics, output files and the CLI.

pub mod balancers;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod learners;
pub mod qp;
pub mod scenario;
mod stats;

pub use error::{Error, Result};
