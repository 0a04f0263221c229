//! Kernels, distance matrices and the constrained quadratic-program solver
//! shared by energy balancing and kernel optimal matching.

mod kernel;
mod solver;

pub use kernel::{
    cross_gram, distance_matrix, gram, median_heuristic, DistanceMatrix, GramMatrix, KernelFamily, KernelSpec,
};
pub(crate) use kernel::euclidean;
pub use solver::{
    project_simplex, solve_qp, EqualityBlock, QpSolution, QpStatus, QuadraticProgram, SolverOptions,
};
