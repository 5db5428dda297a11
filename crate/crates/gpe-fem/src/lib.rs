//! Ground-state solver for the Gross-Pitaevskii eigenvalue problem based on a
//! positivity-preserving mass-lumped linear finite element discretization.
//!
//! The crate provides:
//!
//! * [`mesh`] — Friedrichs-Keller triangulations of axis-aligned boxes,
//!   uniform red refinement into nested hierarchies, and exact nodal
//!   prolongation between nested meshes;
//! * [`assembly`] — stiffness, consistent mass and weighted lumped mass
//!   matrices over interior nodes, plus M-matrix and irreducibility checks;
//! * [`forms`] — the lumped inner product, discrete energy, discrete
//!   eigenvalue functional and nonlinear residual;
//! * [`solver`] — the fully discretized energy-adaptive Sobolev gradient
//!   flow, step-size bounds and a linearized eigensolver;
//! * [`baseline`] — a standard (non-lumped) linear FEM ground-state solver
//!   used for reference solutions and error computation;
//! * [`verify`] — executable oracles: discrete Picone inequality, convex
//!   reformulation minimality, lumping-error and boundedness scans;
//! * [`experiment`] — configuration-driven experiment runner producing
//!   convergence tables and verification reports (backs the `gpe` CLI).

pub mod assembly;
pub mod baseline;
pub mod experiment;
pub mod forms;
pub mod linalg;
pub mod mesh;
pub mod quadrature;
pub mod solver;
pub mod verify;

pub use forms::ProblemData;
pub use mesh::{FeFunction, SimplicialMesh};
pub use solver::{FlowConfig, GroundStateSolution};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument or precondition violation.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Operands live on different meshes or on non-nested meshes.
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    /// Requested feature is outside what this crate implements.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A linear or eigenvalue solve failed to converge or was ill-posed.
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    /// The gradient flow failed (strict mesh check, non-SPD system, ...).
    #[error("solver failure: {0}")]
    Solver(String),
    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
