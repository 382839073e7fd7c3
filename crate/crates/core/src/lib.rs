//! Distributed solver for stochastic generalized Nash equilibrium problems
//! with shared affine constraints.
//!
//! Agents minimize expected costs over local boxes subject to coupling
//! constraints `A x <= b`. Each agent keeps a local copy of the multiplier and
//! an auxiliary consensus variable; the iteration is a damped, preconditioned
//! forward-backward scheme over a communication graph, with the expected
//! gradient replaced by a sample average over a growing batch.
//!
//! The crate also provides a centralized reference solver and KKT
//! diagnostics ([`diagnostics`]), a networked Cournot benchmark generator
//! ([`market`]) and a damping sweep that writes trajectory CSVs
//! ([`experiment`]).

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod game;
pub mod graph;
pub mod instance;
pub mod market;
pub mod operators;
pub mod sampling;
pub mod solver;

pub use diagnostics::{kkt_residual, solve_reference, KktResidual, ReferenceSolution};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentOutcome, RunManifest};
pub use game::{AgentSpec, BoxSet, CouplingConstraints, GameSpec, PriceModel, Violation};
pub use graph::{step_size_bounds, DualGraph, Edge, StepSizeBounds};
pub use instance::{InstanceFile, SolutionFile};
pub use market::{generate_instance, BenchConfig, Range};
pub use operators::{backward_step, IterateState, StepSizes};
pub use solver::{
    BoundPolicy, GradientMode, IterRecord, RunReport, SamplingSchedule, Solver, SolverParams, Termination,
};
