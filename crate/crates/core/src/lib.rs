//! Hybrid Krylov solvers for large-scale Tikhonov-regularized linear inverse
//! problems with a nontrivial prior covariance.

pub mod covariance;
pub mod gengk;
pub mod hybrid;
pub mod linop;
pub mod problems;
pub mod projected;
pub mod reference;
pub mod regparam;

pub use covariance::{GridGeometry, KernelFamily, KernelSpec, StationaryCovarianceOperator};
pub use gengk::{Bidiagonal, GenGkState};
pub use hybrid::{semiconvergence_probe, solve, HybridOptions, SolveRecord};
pub use projected::{recover_solution, ProjectedProblem, ProjectedSolution, SolverVariant};
pub use reference::{filtered_solution, gsvd, picard_data, FilterSpec, GsvdFactors};
pub use regparam::{ParamRule, StopReason, StopRule};
pub use linop::{
    DenseOperator, DiagonalOperator, LinearOperator, NoiseModel, OperatorError,
};
pub use problems::{KlSpec, ProblemInstance, RayGeometry, RigidMotion, SuperResGeometry};
