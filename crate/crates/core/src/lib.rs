//! Solver library for infinite-horizon Bayesian-risk Markov decision
//! processes (BR-MDPs) with convex risk measures.
//!
//! A BR-MDP couples a finite MDP whose randomness distribution depends on an
//! unknown parameter θ (drawn from a finite candidate set Θ) with a Bayesian
//! posterior μ over Θ.  The value recursion applies a convex risk measure ρ_μ
//! to the per-θ continuation costs at every stage:
//!
//! ```text
//! V(s, μ) = min_a ρ_μ( E_θ[ C(s, a, ξ) + γ V(g(s, a, ξ), μ') ] ),
//! μ'(θ) ∝ μ(θ) f(ξ; θ)
//! ```
//!
//! # Core abstractions
//!
//! - [`model`] — immutable problem data: state equation, cost, per-θ
//!   likelihoods, discount; beliefs over Θ.
//! - [`risk`] — parametric convex risk measures (expectation, CVaR) with
//!   exact minimizers and subgradients.
//! - [`belief`] — posterior updates, finite belief grids, and the
//!   least-squares interpolation weights that project new posteriors onto a
//!   grid.
//! - [`lp`] — a dense revised-simplex linear-program solver (two-phase,
//!   bounded variables, Bland anti-cycling fallback).
//! - [`ccp`] — the convex-concave procedure that solves the grid-restricted
//!   bilevel difference-convex program and yields certified lower bounds.
//! - [`planner`] — policy extraction, finite-state-controller evaluation
//!   (upper bounds), posterior-grid growth, and the refinement loop that
//!   drives the gap below a target ε.
//! - [`reference`] — exact small-instance oracles and baseline solvers
//!   (nominal maximum-likelihood, distributionally robust).
//! - [`envs`] — benchmark environments: grid path planning with uncertain
//!   traffic/accident parameters, and multi-item inventory control with
//!   uncertain demand rates.
//! - [`harness`] — seeded replication experiments with CSV outputs.
//!
//! All solver entry points are deterministic functions of their inputs; the
//! harness derives every random stream from a single master seed.

pub mod belief;
pub mod ccp;
pub mod envs;
pub mod harness;
pub mod lp;
pub mod model;
pub mod planner;
pub mod reference;
pub mod risk;
pub mod synth;
pub mod util;

pub use belief::{BeliefSet, InterpolationWeights};
pub use ccp::{CcpOptions, CcpOutcome, ConstraintSystem, SubproblemMode, ValueTable};
pub use envs::{Env, InventoryConfig, PathPlanningConfig};
pub use harness::{
    EnvironmentConfig, EnvironmentRef, ExperimentConfig, ExperimentResults, Method,
    MethodMetrics, ReplicationRecord,
};
pub use lp::{LinearProgram, LpSolution, LpStatus};
pub use model::{AugmentedState, Belief, ModelSpec, ParamSpace};
pub use planner::{AbdcpOptions, AbdcpResult, FscPolicy, StopReason};
pub use risk::{RiskEval, RiskSpec};
