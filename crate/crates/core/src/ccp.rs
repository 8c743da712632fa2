//! Constraint assembly and the convex–concave procedure (CCP) for the
//! grid-restricted bilevel program.
//!
//! On a belief grid `M̂` the lower-bounding program is
//!
//! ```text
//! max  Σ_{s,i} α(s, μ_i) V(s, μ_i)
//! s.t. V(s, μ_i) ≤ ρ_{μ_i}( z(V) )        for every (s, μ_i, a),
//!      0 ≤ V ≤ C_max / (1 − γ),
//! ```
//!
//! where `z_θ(V) = Σ_ξ f(ξ; θ) [C(s,a,ξ) + γ Ṽ(g(s,a,ξ), μ_i^{ξ})]` and
//! `Ṽ(s', μ') = Σ_j w_j V(s', μ_j)` interpolates off-grid posteriors.  The
//! right-hand side is convex in `V`, so each CCP iteration replaces it with
//! its affine minorant at the incumbent `V^k` (a supporting plane built from
//! a risk subgradient) and solves the resulting linear subproblem.  Because
//! the minorant under-estimates the true right-hand side, every iterate stays
//! feasible for the original program and the objective is non-decreasing.
//!
//! The linearized subproblem can be solved two ways, selected by
//! [`SubproblemMode`]:
//!
//! * [`SubproblemMode::Lp`] assembles the subproblem explicitly and calls the
//!   dense simplex solver — transparent, and exact up to LP tolerances.
//! * [`SubproblemMode::FixedPoint`] exploits that the subproblem's optimum is
//!   the unique fixed point of the monotone γ-contraction
//!   `(L V)(s, μ_i) = min_a [ minorant:a(V) ]`, reached by value-iteration
//!   sweeps warm-started from the incumbent.  Starting from a feasible point
//!   the sweeps increase monotonically, so stopping early still yields a
//!   feasible (slightly weaker) iterate.
//!
//! For the expectation risk measure ρ is already affine, the minorant is
//! exact, and the procedure terminates after a single iteration.

use crate::belief::{grid_transition, BeliefError, BeliefSet, InterpolationWeights};
use crate::lp::{solve_lp, LinearProgram, LpError, LpStatus};
use crate::model::{ModelSpec, Violation};
use crate::risk::{rho, RiskError, RiskEval, RiskSpec};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Allowed one-step decrease of the CCP objective before the run is declared
/// numerically broken (the exact procedure is non-decreasing).
pub const MONOTONE_SLACK: f64 = 1e-8;
const MAX_SWEEPS: u64 = 200_000;

#[derive(Debug)]
pub enum CcpError {
    /// The model failed validation; all violations are listed.
    InvalidModel(Vec<Violation>),
    InvalidRisk(RiskError),
    Belief(BeliefError),
    Lp(LpError),
    /// The linearized subproblem LP was not solvable to optimality.
    SubproblemStatus(LpStatus),
    /// The objective decreased beyond [`MONOTONE_SLACK`].
    MonotoneViolation { iteration: usize, previous: f64, current: f64 },
    Numerical(String),
}

impl fmt::Display for CcpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CcpError::InvalidModel(v) => {
                write!(f, "model failed validation with {} violation(s): ", v.len())?;
                for (i, violation) in v.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(f, "{violation}")?;
                }
                Ok(())
            }
            CcpError::InvalidRisk(e) => write!(f, "invalid risk measure: {e}"),
            CcpError::Belief(e) => write!(f, "belief computation failed: {e}"),
            CcpError::Lp(e) => write!(f, "subproblem LP failed: {e}"),
            CcpError::SubproblemStatus(s) => {
                write!(f, "linearized subproblem reported {s:?}, expected Optimal")
            }
            CcpError::MonotoneViolation { iteration, previous, current } => write!(
                f,
                "CCP objective decreased at iteration {iteration}: {previous} -> {current}"
            ),
            CcpError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for CcpError {}

impl From<BeliefError> for CcpError {
    fn from(e: BeliefError) -> Self {
        CcpError::Belief(e)
    }
}

impl From<RiskError> for CcpError {
    fn from(e: RiskError) -> Self {
        CcpError::InvalidRisk(e)
    }
}

impl From<LpError> for CcpError {
    fn from(e: LpError) -> Self {
        CcpError::Lp(e)
    }
}

/// How the linearized subproblem is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubproblemMode {
    /// Explicit dense LP (small instances; exact up to simplex tolerances).
    Lp,
    /// Monotone value-iteration sweeps to the subproblem's fixed point.
    FixedPoint,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CcpOptions {
    /// Stop when the objective improves by no more than this.
    pub tol: f64,
    /// Maximum CCP iterations.
    pub max_iter: usize,
    pub mode: SubproblemMode,
    /// Fixed-point accuracy (sup-norm distance to the subproblem optimum).
    pub fp_tol: f64,
}

impl Default for CcpOptions {
    fn default() -> Self {
        CcpOptions { tol: 1e-6, max_iter: 100, mode: SubproblemMode::FixedPoint, fp_tol: 1e-9 }
    }
}

/// Values on the `(state, grid member)` lattice, row-major by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    n_states: usize,
    n_members: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(n_states: usize, n_members: usize) -> Self {
        ValueTable { n_states, n_members, values: vec![0.0; n_states * n_members] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    pub fn get(&self, state: usize, member: usize) -> f64 {
        self.values[state * self.n_members + member]
    }

    pub fn set(&mut self, state: usize, member: usize, value: f64) {
        self.values[state * self.n_members + member] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Mean value across all nodes (the uniform CCP objective).
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `‖self − other‖∞` over the table entries.
    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One constraint row: a `(state, member, action)` triple with its
/// action-conditional expected stage costs and successor states.
#[derive(Debug, Clone)]
pub struct Row {
    pub state: usize,
    pub member: usize,
    pub action: usize,
    /// `Σ_ξ f(ξ; θ) C(s, a, ξ)` per parameter θ.
    pub cbar: Vec<f64>,
    /// `g(s, a, ξ)` per outcome ξ.
    pub next_state: Vec<usize>,
}

/// Affine minorants of every row's right-hand side at a reference table.
struct Linearization {
    /// Per row: minorant value at `V = 0` interpolants.
    consts: Vec<f64>,
    /// Per row and outcome: `γ Σ_θ λ_θ f(ξ; θ)` (coefficient on the
    /// interpolated successor value).
    coeffs: Vec<f64>,
}

/// The grid-restricted constraint system for a model, belief set, and risk
/// measure.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    model: ModelSpec,
    set: BeliefSet,
    risk: RiskSpec,
    /// Interpolation weights of the one-step posterior, per `[member][ξ]`.
    weights: Vec<Vec<InterpolationWeights>>,
    rows: Vec<Row>,
    /// Rows of node `s·I + i` live at `node_offsets[n]..node_offsets[n+1]`.
    node_offsets: Vec<usize>,
}

impl ConstraintSystem {
    /// Validates the inputs and assembles all rows.
    pub fn assemble(
        model: &ModelSpec,
        set: &BeliefSet,
        risk: RiskSpec,
    ) -> Result<ConstraintSystem, CcpError> {
        let violations = model.validate();
        if !violations.is_empty() {
            return Err(CcpError::InvalidModel(violations));
        }
        risk.validate()?;
        if set.n_thetas() != model.n_thetas() {
            return Err(CcpError::Numerical(format!(
                "belief set over {} parameters, model has {}",
                set.n_thetas(),
                model.n_thetas()
            )));
        }

        let weights = grid_transition(model, set)?;
        let n_members = set.len();
        let mut rows = Vec::new();
        let mut node_offsets = Vec::with_capacity(model.n_states * n_members + 1);
        node_offsets.push(0);
        for state in 0..model.n_states {
            for member in 0..n_members {
                for &action in &model.admissible[state] {
                    let cbar = (0..model.n_thetas())
                        .map(|theta| model.expected_cost(state, action, theta))
                        .collect();
                    let next_state = (0..model.n_xi())
                        .map(|xi| model.g(state, action, xi))
                        .collect();
                    rows.push(Row { state, member, action, cbar, next_state });
                }
                node_offsets.push(rows.len());
            }
        }
        Ok(ConstraintSystem { model: model.clone(), set: set.clone(), risk, weights, rows, node_offsets })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn set(&self) -> &BeliefSet {
        &self.set
    }

    pub fn risk(&self) -> RiskSpec {
        self.risk
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn weights(&self) -> &[Vec<InterpolationWeights>] {
        &self.weights
    }

    pub fn n_nodes(&self) -> usize {
        self.model.n_states * self.set.len()
    }

    /// Row indices belonging to grid node `(state, member)`.
    pub fn node_rows(&self, state: usize, member: usize) -> std::ops::Range<usize> {
        let node = state * self.set.len() + member;
        self.node_offsets[node]..self.node_offsets[node + 1]
    }

    /// Interpolated successor values `W[i][ξ][s'] = Σ_j w_j V(s', μ_j)`,
    /// flattened as `(i · n_xi + ξ) · n_states + s'`.
    pub(crate) fn interp_values(&self, v: &ValueTable) -> Vec<f64> {
        interp_table(&self.weights, v, self.model.n_states, self.model.n_xi())
    }

    /// `z_θ(V)` for one row given a precomputed interpolation table.
    pub(crate) fn row_z(&self, row: &Row, w_table: &[f64]) -> Vec<f64> {
        let n_xi = self.model.n_xi();
        let n_states = self.model.n_states;
        let gamma = self.model.discount;
        let base = row.member * n_xi;
        (0..self.model.n_thetas())
            .map(|theta| {
                let mut v = row.cbar[theta];
                for xi in 0..n_xi {
                    let fp = self.model.f(xi, theta);
                    if fp > 0.0 {
                        v += gamma * fp * w_table[(base + xi) * n_states + row.next_state[xi]];
                    }
                }
                v
            })
            .collect()
    }

    /// Exact right-hand side `ρ_{μ_i}(z(V))` of one row: its value, the
    /// risk minimizer `φ*`, and the subgradient coefficients `λ`.
    pub fn risk_rhs(&self, row_idx: usize, v: &ValueTable) -> Result<RiskEval, CcpError> {
        let w_table = self.interp_values(v);
        let row = &self.rows[row_idx];
        let z = self.row_z(row, &w_table);
        Ok(rho(self.risk, &z, self.set.member(row.member))?)
    }

    /// Exact right-hand sides of every row at `v`, in row order.
    pub fn all_risk_rhs(&self, v: &ValueTable) -> Result<Vec<RiskEval>, CcpError> {
        let w_table = self.interp_values(v);
        self.rows
            .iter()
            .map(|row| Ok(rho(self.risk, &self.row_z(row, &w_table), self.set.member(row.member))?))
            .collect()
    }

    fn linearize(&self, v: &ValueTable) -> Result<Linearization, CcpError> {
        let n_xi = self.model.n_xi();
        let n_states = self.model.n_states;
        let gamma = self.model.discount;
        let w_table = self.interp_values(v);
        let mut consts = Vec::with_capacity(self.rows.len());
        let mut coeffs = Vec::with_capacity(self.rows.len() * n_xi);
        for row in &self.rows {
            let z = self.row_z(row, &w_table);
            let eval = rho(self.risk, &z, self.set.member(row.member))?;
            let mut c = eval.value;
            let base = row.member * n_xi;
            for xi in 0..n_xi {
                let mut coeff = 0.0;
                for (theta, &lam) in eval.lambda.iter().enumerate() {
                    if lam > 0.0 {
                        coeff += lam * self.model.f(xi, theta);
                    }
                }
                let coeff = gamma * coeff;
                coeffs.push(coeff);
                c -= coeff * w_table[(base + xi) * n_states + row.next_state[xi]];
            }
            consts.push(c);
        }
        Ok(Linearization { consts, coeffs })
    }

    /// Value of row `r`'s minorant at `v` (via its interpolation table).
    fn minorant(&self, lin: &Linearization, r: usize, w_table: &[f64]) -> f64 {
        let n_xi = self.model.n_xi();
        let n_states = self.model.n_states;
        let row = &self.rows[r];
        let base = row.member * n_xi;
        let mut val = lin.consts[r];
        for xi in 0..n_xi {
            let c = lin.coeffs[r * n_xi + xi];
            if c != 0.0 {
                val += c * w_table[(base + xi) * n_states + row.next_state[xi]];
            }
        }
        val
    }

    /// Solves the linearized subproblem by monotone sweeps from `start`
    /// (which must be feasible for the linearization).
    fn solve_fixed_point(
        &self,
        lin: &Linearization,
        start: &ValueTable,
        fp_tol: f64,
    ) -> Result<ValueTable, CcpError> {
        let vmax = self.model.v_max();
        let gamma = self.model.discount;
        let threshold = if gamma > 0.0 { fp_tol * (1.0 - gamma) / gamma } else { f64::INFINITY };
        let n_members = self.set.len();
        let mut v = start.clone();
        let mut sweeps: u64 = 0;
        loop {
            let w_table = self.interp_values(&v);
            let mut delta: f64 = 0.0;
            for state in 0..self.model.n_states {
                for member in 0..n_members {
                    let mut best = f64::INFINITY;
                    for r in self.node_rows(state, member) {
                        let val = self.minorant(lin, r, &w_table);
                        if val < best {
                            best = val;
                        }
                    }
                    let new = best.clamp(0.0, vmax);
                    let old = v.get(state, member);
                    delta = delta.max((new - old).abs());
                    v.set(state, member, new);
                }
            }
            sweeps += 1;
            if delta <= threshold {
                return Ok(v);
            }
            if sweeps >= MAX_SWEEPS {
                return Err(CcpError::Numerical(format!(
                    "fixed-point solver exceeded {MAX_SWEEPS} sweeps (last change {delta:.3e})"
                )));
            }
        }
    }

    /// Assembles and solves the linearized subproblem as an explicit LP.
    fn solve_subproblem_lp(&self, lin: &Linearization) -> Result<ValueTable, CcpError> {
        let n_states = self.model.n_states;
        let n_members = self.set.len();
        let n_xi = self.model.n_xi();
        let n_vars = n_states * n_members;
        let vmax = self.model.v_max();
        let alpha = 1.0 / n_vars as f64;

        let mut a_ineq = Vec::with_capacity(self.rows.len());
        let mut b_ineq = Vec::with_capacity(self.rows.len());
        for (r, row) in self.rows.iter().enumerate() {
            let mut coeffs = vec![0.0; n_vars];
            coeffs[row.state * n_members + row.member] += 1.0;
            for xi in 0..n_xi {
                let c = lin.coeffs[r * n_xi + xi];
                if c != 0.0 {
                    let s_next = row.next_state[xi];
                    for &(j, w) in &self.weights[row.member][xi].support {
                        coeffs[s_next * n_members + j] -= c * w;
                    }
                }
            }
            a_ineq.push(coeffs);
            b_ineq.push(lin.consts[r]);
        }

        let lp = LinearProgram {
            objective: vec![-alpha; n_vars],
            a_ineq,
            b_ineq,
            a_eq: Vec::new(),
            d_eq: Vec::new(),
            lower: vec![0.0; n_vars],
            upper: vec![vmax; n_vars],
        };
        let sol = solve_lp(&lp)?;
        if sol.status != LpStatus::Optimal {
            return Err(CcpError::SubproblemStatus(sol.status));
        }
        let mut v = ValueTable::zeros(n_states, n_members);
        for state in 0..n_states {
            for member in 0..n_members {
                v.set(state, member, sol.x[state * n_members + member]);
            }
        }
        Ok(v)
    }
}

/// Interpolated successor values for an arbitrary per-`[member][ξ]` weight
/// table, flattened as `(i · n_xi + ξ) · n_states + s'`.
pub(crate) fn interp_table(
    weights: &[Vec<InterpolationWeights>],
    v: &ValueTable,
    n_states: usize,
    n_xi: usize,
) -> Vec<f64> {
    let n_members = weights.len();
    let mut w_table = vec![0.0; n_members * n_xi * n_states];
    for (i, per_xi) in weights.iter().enumerate() {
        for (xi, w) in per_xi.iter().enumerate() {
            let base = (i * n_xi + xi) * n_states;
            for &(j, wj) in &w.support {
                for s in 0..n_states {
                    w_table[base + s] += wj * v.get(s, j);
                }
            }
        }
    }
    w_table
}

/// Result of a CCP run.
#[derive(Debug, Clone)]
pub struct CcpOutcome {
    pub values: ValueTable,
    /// Number of linearize-and-solve iterations performed.
    pub iterations: usize,
    /// Whether the objective-improvement tolerance was reached.
    pub converged: bool,
    /// Final objective `Σ α V`.
    pub objective: f64,
    /// Objective after each iteration.
    pub trace: Vec<f64>,
}

/// Runs the CCP from `start` (defaults to all zeros, which is feasible since
/// costs are nonnegative).  Every iterate is feasible for the original
/// grid-restricted program, so the result is always a valid lower bound —
/// `converged == false` only means the improvement tolerance was not reached
/// within `max_iter`.
pub fn solve_abdcp(
    system: &ConstraintSystem,
    start: Option<ValueTable>,
    opts: &CcpOptions,
) -> Result<CcpOutcome, CcpError> {
    let n_states = system.model.n_states;
    let n_members = system.set.len();
    let mut v = match start {
        Some(t) => {
            if t.n_states() != n_states || t.n_members() != n_members {
                return Err(CcpError::Numerical(format!(
                    "start table is {}x{}, system needs {}x{}",
                    t.n_states(),
                    t.n_members(),
                    n_states,
                    n_members
                )));
            }
            t
        }
        None => ValueTable::zeros(n_states, n_members),
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let lin = system.linearize(&v)?;
        let next = match opts.mode {
            SubproblemMode::FixedPoint => system.solve_fixed_point(&lin, &v, opts.fp_tol)?,
            SubproblemMode::Lp => system.solve_subproblem_lp(&lin)?,
        };
        let objective = next.mean();
        iterations += 1;
        if let Some(&previous) = trace.last() {
            if objective < previous - MONOTONE_SLACK {
                return Err(CcpError::MonotoneViolation {
                    iteration: iterations,
                    previous,
                    current: objective,
                });
            }
            // Relative objective change drives termination.
            if objective - previous <= opts.tol * previous.abs().max(1.0) {
                v = next;
                trace.push(objective);
                converged = true;
                break;
            }
        }
        trace.push(objective);
        v = next;
        if system.risk.is_affine() {
            // The minorant of an affine ρ is exact: one iteration solves the
            // grid-restricted program outright.
            converged = true;
            break;
        }
    }

    let objective = v.mean();
    Ok(CcpOutcome { values: v, iterations, converged, objective, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::BeliefSet;
    use crate::model::tests::toy_spec;
    use crate::model::{Belief, ModelSpec, ParamSpace};

    /// One state, one action, revealing outcomes (`f(ξ; θ) = 1{ξ = θ}`),
    /// per-outcome costs 1 and 2, γ = 1/2.  Corner values are c·2, the
    /// uniform-belief value is 3.
    fn revealing_spec() -> ModelSpec {
        ModelSpec::new(
            1,
            1,
            vec![vec![0]],
            ParamSpace { thetas: vec![vec![0.0], vec![1.0]] },
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 0],
            vec![1.0, 2.0],
            0.5,
        )
        .unwrap()
    }

    fn uniform_grid(n_thetas: usize) -> BeliefSet {
        BeliefSet::corners_and(n_thetas, &[Belief::uniform(n_thetas)])
    }

    #[test]
    fn revealing_model_hand_values() {
        let model = revealing_spec();
        let set = uniform_grid(2);
        let system = ConstraintSystem::assemble(&model, &set, RiskSpec::Expectation).unwrap();
        let out = solve_abdcp(&system, None, &CcpOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1, "affine risk solves in one iteration");
        // Corners: V = c_θ / (1 − γ) = 2 c_θ.  Uniform: ½(1 + ½·2) + ½(2 + ½·4) = 3.
        assert!((out.values.get(0, 0) - 2.0).abs() < 1e-7, "corner 0: {}", out.values.get(0, 0));
        assert!((out.values.get(0, 1) - 4.0).abs() < 1e-7, "corner 1: {}", out.values.get(0, 1));
        assert!((out.values.get(0, 2) - 3.0).abs() < 1e-7, "uniform: {}", out.values.get(0, 2));
    }

    #[test]
    fn lp_and_fixed_point_routes_agree() {
        let model = toy_spec();
        let set = BeliefSet::corners_and(
            2,
            &[Belief::uniform(2), Belief::new(vec![0.3, 0.7]).unwrap()],
        );
        for risk in [RiskSpec::Expectation, RiskSpec::Cvar { alpha: 0.7 }] {
            let system = ConstraintSystem::assemble(&model, &set, risk).unwrap();
            let fp = solve_abdcp(
                &system,
                None,
                &CcpOptions { mode: SubproblemMode::FixedPoint, fp_tol: 1e-11, ..Default::default() },
            )
            .unwrap();
            let lp = solve_abdcp(
                &system,
                None,
                &CcpOptions { mode: SubproblemMode::Lp, ..Default::default() },
            )
            .unwrap();
            let diff = fp.values.sup_distance(&lp.values);
            assert!(diff < 1e-6, "{risk:?}: routes differ by {diff}");
        }
    }

    #[test]
    fn objective_trace_is_monotone_and_converges() {
        let model = toy_spec();
        let set = uniform_grid(2);
        let system =
            ConstraintSystem::assemble(&model, &set, RiskSpec::Cvar { alpha: 0.9 }).unwrap();
        let out = solve_abdcp(&system, None, &CcpOptions::default()).unwrap();
        assert!(out.converged);
        for pair in out.trace.windows(2) {
            assert!(pair[1] >= pair[0] - MONOTONE_SLACK, "trace must be non-decreasing");
        }
        assert!(out.objective > 0.0);
    }

    #[test]
    fn iterates_stay_feasible_for_the_original_constraints() {
        let model = toy_spec();
        let set = uniform_grid(2);
        let system =
            ConstraintSystem::assemble(&model, &set, RiskSpec::Cvar { alpha: 0.8 }).unwrap();
        let out = solve_abdcp(&system, None, &CcpOptions::default()).unwrap();
        let risks = system.all_risk_rhs(&out.values).unwrap();
        for (row, eval) in system.rows().iter().zip(&risks) {
            let v = out.values.get(row.state, row.member);
            assert!(
                v <= eval.value + 1e-7,
                "node ({}, {}) action {}: V = {v} exceeds rhs {}",
                row.state,
                row.member,
                row.action,
                eval.value
            );
        }
    }

    #[test]
    fn cvar_value_dominates_expectation_value() {
        let model = toy_spec();
        let set = uniform_grid(2);
        let exp_sys = ConstraintSystem::assemble(&model, &set, RiskSpec::Expectation).unwrap();
        let cvar_sys =
            ConstraintSystem::assemble(&model, &set, RiskSpec::Cvar { alpha: 0.9 }).unwrap();
        let exp = solve_abdcp(&exp_sys, None, &CcpOptions::default()).unwrap();
        let cvar = solve_abdcp(&cvar_sys, None, &CcpOptions::default()).unwrap();
        for s in 0..model.n_states {
            for i in 0..set.len() {
                assert!(
                    cvar.values.get(s, i) >= exp.values.get(s, i) - 1e-7,
                    "CVaR value should dominate expectation at ({s}, {i})"
                );
            }
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let model = toy_spec();
        let set = uniform_grid(2);
        let a = ConstraintSystem::assemble(&model, &set, RiskSpec::Cvar { alpha: 0.5 }).unwrap();
        let b = ConstraintSystem::assemble(&model, &set, RiskSpec::Cvar { alpha: 0.5 }).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.state, rb.state);
            assert_eq!(ra.member, rb.member);
            assert_eq!(ra.action, rb.action);
            assert_eq!(ra.cbar, rb.cbar);
            assert_eq!(ra.next_state, rb.next_state);
        }
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            for (xa, xb) in wa.iter().zip(wb) {
                assert_eq!(xa.support, xb.support);
            }
        }
    }

    #[test]
    fn row_risk_at_zero_equals_stage_risk() {
        let model = toy_spec();
        let set = uniform_grid(2);
        let system =
            ConstraintSystem::assemble(&model, &set, RiskSpec::Expectation).unwrap();
        let zero = ValueTable::zeros(model.n_states, set.len());
        // Row for node (state 0, uniform member index 2), single action.
        let range = system.node_rows(0, 2);
        let eval = system.risk_rhs(range.start, &zero).unwrap();
        // z_θ at V = 0 is the expected stage cost: (1.3, 1.8); uniform mean 1.55.
        assert!((eval.value - 1.55).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_model() {
        let mut model = toy_spec();
        model.discount = 1.5;
        let set = uniform_grid(2);
        let err = ConstraintSystem::assemble(&model, &set, RiskSpec::Expectation).unwrap_err();
        assert!(matches!(err, CcpError::InvalidModel(_)));
    }

    #[test]
    fn rejects_mismatched_start_table() {
        let model = toy_spec();
        let set = uniform_grid(2);
        let system = ConstraintSystem::assemble(&model, &set, RiskSpec::Expectation).unwrap();
        let bad = ValueTable::zeros(1, 1);
        assert!(solve_abdcp(&system, Some(bad), &CcpOptions::default()).is_err());
    }
}
