//! Sparse, multiplexed optimal control for finite ensembles of linear
//! time-invariant systems.
//!
//! At each instant at most one subsystem of the ensemble may receive a
//! non-zero control; all others coast in open loop. Controls are
//! additionally driven to be sparse in time, either as the objective
//! itself (ballistic reachability) or through L0 regularization of a
//! quadratic cost (sparse LQ, sparse Mayer). The pointwise control laws
//! and multiplexer selection rules live in [`pmp_law`]; the resulting
//! two-point boundary value problems are solved by single shooting on
//! the initial adjoint in [`shooting`].

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod pmp_law;
pub mod shooting;
pub mod verify;

pub use dynamics::{expm, propagate_adjoint_closed_form, rk4_integrate, Direction, TimeGrid, Trajectory};
pub use ensemble::{assemble_joint, split_joint, stack, ActionSet, Ensemble, JointSystem, LinearSubsystem};
pub use error::{Error, Result};
pub use pmp_law::{
    riccati_feedback_sign, riccati_solve, select_multiplexer, FeedbackSign, Multiplier, ProblemMode,
    RiccatiSolution, Smoothing,
};
pub use shooting::{solve, ShootingProblem, SolveReport, SolverConfig, StageStats};
pub use verify::{
    check_action_sets, check_multiplexing, evaluate_costs, hamiltonian_trace, l0_norm, CostBreakdown,
    HamiltonianTrace, MultiplexingReport,
};
