//! Exact small-instance oracle, Bellman-operator utilities on closed belief
//! grids, and the two classical baselines (nominal MLE and the
//! distributionally robust MDP).
//!
//! The oracle enumerates the finite-horizon nested recursion
//!
//! ```text
//! V_t(s, μ) = min_a ρ_μ( z ),
//! z_θ       = Σ_ξ f(ξ; θ) [ C(s,a,ξ) + γ V_{t+1}(g(s,a,ξ), bayes(μ, ξ)) ],
//! V_H ≡ 0,
//! ```
//!
//! with no interpolation anywhere, memoized on outcome counts: the posterior
//! after any outcome sequence depends only on how many times each outcome
//! occurred, so `(depth, state, counts)` identifies a node exactly.  By the
//! γ-contraction argument the truncation error is at most
//! `γ^H · C_max / (1 − γ)`, and since costs are nonnegative the truncated
//! value never exceeds the infinite-horizon value.

use crate::belief::{bayes_update, BeliefError, BeliefSet, DEDUP_TOL};
use crate::ccp::ValueTable;
use crate::model::{Belief, ModelSpec};
use crate::planner::GridPolicy;
use crate::risk::{rho, RiskSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Default cap on distinct belief-tree nodes in [`exact_value`].
pub const DEFAULT_NODE_BUDGET: usize = 5_000_000;
const VI_TOL: f64 = 1e-8;
const MAX_VI_SWEEPS: u64 = 5_000_000;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("belief tree exceeded the node budget with {nodes} nodes")]
    BudgetExceeded { nodes: usize },
    #[error("grid is not closed: posterior of member {member} after outcome {xi} is absent")]
    MissingChild { member: usize, xi: usize },
    #[error("value table is {got_states}x{got_members}, grid needs {want_states}x{want_members}")]
    DimensionMismatch {
        got_states: usize,
        got_members: usize,
        want_states: usize,
        want_members: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no parameter explains the dataset (all likelihoods vanish)")]
    AllZeroLikelihood,
    #[error("parameter subset is empty")]
    EmptySubset,
    #[error("parameter index {0} out of range")]
    BadParameter(usize),
    #[error("value iteration did not converge within {0} sweeps")]
    NoConvergence(u64),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("risk evaluation failed: {0}")]
    Risk(String),
}

/// Exact truncated value with its truncation bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonValue {
    pub value: f64,
    /// `γ^H · C_max / (1 − γ)`; the infinite-horizon value lies in
    /// `[value, value + truncation_bound]`.
    pub truncation_bound: f64,
}

struct TreeEval<'a> {
    model: &'a ModelSpec,
    risk: RiskSpec,
    budget: usize,
    memo: HashMap<(u32, usize, Vec<u16>), f64>,
}

impl TreeEval<'_> {
    fn value(
        &mut self,
        depth: u32,
        state: usize,
        counts: &[u16],
        mu: &Belief,
    ) -> Result<f64, ReferenceError> {
        if depth == 0 {
            return Ok(0.0);
        }
        let key = (depth, state, counts.to_vec());
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }

        let model = self.model;
        let n_xi = model.n_xi();
        // One-step posteriors; impossible outcomes keep the belief (and the
        // outcome counts) unchanged, consistent with the grid solver.
        let mut posts: Vec<Option<Belief>> = Vec::with_capacity(n_xi);
        for xi in 0..n_xi {
            match bayes_update(model, mu, xi) {
                Ok(p) => posts.push(Some(p)),
                Err(BeliefError::ImpossibleObservation { .. }) => posts.push(None),
                Err(e) => return Err(e.into()),
            }
        }

        let mut best = f64::INFINITY;
        let mut z = vec![0.0; model.n_thetas()];
        let mut child_counts = counts.to_vec();
        for &action in &model.admissible[state] {
            // Continuation values per outcome.
            let mut cont = Vec::with_capacity(n_xi);
            for xi in 0..n_xi {
                let s_next = model.g(state, action, xi);
                let v = match &posts[xi] {
                    Some(post) => {
                        child_counts[xi] += 1;
                        let v = self.value(depth - 1, s_next, &child_counts, post)?;
                        child_counts[xi] -= 1;
                        v
                    }
                    None => self.value(depth - 1, s_next, counts, mu)?,
                };
                cont.push(v);
            }
            for (theta, zt) in z.iter_mut().enumerate() {
                let mut acc = 0.0;
                for xi in 0..n_xi {
                    let fp = model.f(xi, theta);
                    if fp > 0.0 {
                        acc += fp
                            * (model.stage_cost(state, action, xi)
                                + model.discount * cont[xi]);
                    }
                }
                *zt = acc;
            }
            let eval = rho(self.risk, &z, mu).map_err(|e| ReferenceError::Risk(e.to_string()))?;
            if eval.value < best {
                best = eval.value;
            }
        }

        self.memo.insert(key, best);
        if self.memo.len() > self.budget {
            return Err(ReferenceError::BudgetExceeded { nodes: self.memo.len() });
        }
        Ok(best)
    }
}

/// Exact horizon-`H` value at `(state, mu)` by full belief-tree enumeration,
/// memoized on outcome counts.  See the module docs for the recursion.
pub fn exact_value(
    model: &ModelSpec,
    risk: RiskSpec,
    state: usize,
    mu: &Belief,
    horizon: u32,
) -> Result<HorizonValue, ReferenceError> {
    exact_value_with_budget(model, risk, state, mu, horizon, DEFAULT_NODE_BUDGET)
}

/// [`exact_value`] with an explicit node budget.
pub fn exact_value_with_budget(
    model: &ModelSpec,
    risk: RiskSpec,
    state: usize,
    mu: &Belief,
    horizon: u32,
    budget: usize,
) -> Result<HorizonValue, ReferenceError> {
    let mut eval = TreeEval { model, risk, budget, memo: HashMap::new() };
    let counts = vec![0u16; model.n_xi()];
    let value = eval.value(horizon, state, &counts, mu)?;
    let truncation_bound = if model.discount > 0.0 {
        model.discount.powi(horizon as i32) * model.v_max()
    } else if horizon == 0 {
        model.v_max()
    } else {
        0.0
    };
    Ok(HorizonValue { value, truncation_bound })
}

/// A belief grid closed under the Bayes update: every one-step posterior of
/// a member is itself a member (impossible outcomes map to the member).
#[derive(Debug, Clone)]
pub struct ClosedGrid {
    set: BeliefSet,
    /// `children[member][ξ]` = member index of the one-step posterior.
    children: Vec<Vec<usize>>,
}

impl ClosedGrid {
    /// Verifies closure and records the child map; fails with the offending
    /// `(member, outcome)` pair otherwise.
    pub fn build(model: &ModelSpec, set: BeliefSet) -> Result<Self, ReferenceError> {
        let mut children = Vec::with_capacity(set.len());
        for member in 0..set.len() {
            let mut row = Vec::with_capacity(model.n_xi());
            for xi in 0..model.n_xi() {
                match bayes_update(model, set.member(member), xi) {
                    Ok(post) => {
                        let child = (0..set.len())
                            .find(|&j| set.member(j).euclidean(&post) <= DEDUP_TOL)
                            .ok_or(ReferenceError::MissingChild { member, xi })?;
                        row.push(child);
                    }
                    Err(BeliefError::ImpossibleObservation { .. }) => row.push(member),
                    Err(e) => return Err(e.into()),
                }
            }
            children.push(row);
        }
        Ok(ClosedGrid { set, children })
    }

    pub fn set(&self) -> &BeliefSet {
        &self.set
    }

    pub fn child(&self, member: usize, xi: usize) -> usize {
        self.children[member][xi]
    }

    fn check_dims(&self, model: &ModelSpec, v: &ValueTable) -> Result<(), ReferenceError> {
        if v.n_states() != model.n_states || v.n_members() != self.set.len() {
            return Err(ReferenceError::DimensionMismatch {
                got_states: v.n_states(),
                got_members: v.n_members(),
                want_states: model.n_states,
                want_members: self.set.len(),
            });
        }
        Ok(())
    }

    fn action_risk(
        &self,
        model: &ModelSpec,
        risk: RiskSpec,
        v: &ValueTable,
        state: usize,
        member: usize,
        action: usize,
    ) -> Result<f64, ReferenceError> {
        let z: Vec<f64> = (0..model.n_thetas())
            .map(|theta| {
                let mut acc = 0.0;
                for xi in 0..model.n_xi() {
                    let fp = model.f(xi, theta);
                    if fp > 0.0 {
                        acc += fp
                            * (model.stage_cost(state, action, xi)
                                + model.discount
                                    * v.get(model.g(state, action, xi), self.child(member, xi)));
                    }
                }
                acc
            })
            .collect();
        rho(risk, &z, self.set.member(member))
            .map(|e| e.value)
            .map_err(|e| ReferenceError::Risk(e.to_string()))
    }
}

/// One exact application of the Bellman operator
/// `(T V)(s, μ) = min_a ρ_μ(z(V))` on a closed grid.
pub fn bellman_apply(
    model: &ModelSpec,
    grid: &ClosedGrid,
    risk: RiskSpec,
    v: &ValueTable,
) -> Result<ValueTable, ReferenceError> {
    grid.check_dims(model, v)?;
    let mut out = ValueTable::zeros(model.n_states, grid.set.len());
    for state in 0..model.n_states {
        for member in 0..grid.set.len() {
            let mut best = f64::INFINITY;
            for &action in &model.admissible[state] {
                let val = grid.action_risk(model, risk, v, state, member, action)?;
                if val < best {
                    best = val;
                }
            }
            out.set(state, member, best);
        }
    }
    Ok(out)
}

/// One exact application of the policy operator `T^π` on a closed grid.
pub fn bellman_apply_policy(
    model: &ModelSpec,
    grid: &ClosedGrid,
    risk: RiskSpec,
    policy: &GridPolicy,
    v: &ValueTable,
) -> Result<ValueTable, ReferenceError> {
    grid.check_dims(model, v)?;
    let mut out = ValueTable::zeros(model.n_states, grid.set.len());
    for state in 0..model.n_states {
        for member in 0..grid.set.len() {
            let action = policy.action(state, member);
            let val = grid.action_risk(model, risk, v, state, member, action)?;
            out.set(state, member, val);
        }
    }
    Ok(out)
}

/// Standard value iteration under a fixed parameter, to sup-norm change
/// `tol`; returns values and the greedy policy (ties to the smallest action
/// index).
pub fn value_iteration_under_theta(
    model: &ModelSpec,
    theta: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<usize>), ReferenceError> {
    if theta >= model.n_thetas() {
        return Err(ReferenceError::BadParameter(theta));
    }
    let q = |state: usize, action: usize, v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for xi in 0..model.n_xi() {
            let fp = model.f(xi, theta);
            if fp > 0.0 {
                acc += fp
                    * (model.stage_cost(state, action, xi)
                        + model.discount * v[model.g(state, action, xi)]);
            }
        }
        acc
    };

    let mut v = vec![0.0; model.n_states];
    let mut sweeps: u64 = 0;
    loop {
        let mut delta: f64 = 0.0;
        for state in 0..model.n_states {
            let mut best = f64::INFINITY;
            for &action in &model.admissible[state] {
                let val = q(state, action, &v);
                if val < best {
                    best = val;
                }
            }
            delta = delta.max((best - v[state]).abs());
            v[state] = best;
        }
        sweeps += 1;
        if delta <= tol {
            break;
        }
        if sweeps >= MAX_VI_SWEEPS {
            return Err(ReferenceError::NoConvergence(sweeps));
        }
    }

    let policy = (0..model.n_states)
        .map(|state| {
            let mut best = (model.admissible[state][0], f64::INFINITY);
            for &action in &model.admissible[state] {
                let val = q(state, action, &v);
                if val < best.1 - 1e-12 {
                    best = (action, val);
                }
            }
            best.0
        })
        .collect();
    Ok((v, policy))
}

/// Maximum-likelihood parameter index from per-observation log-likelihood
/// rows (`rows[j][θ] = log f(ξ_j; θ)`); ties go to the smallest index.
pub fn mle_index(loglik_rows: &[Vec<f64>]) -> Result<usize, ReferenceError> {
    if loglik_rows.is_empty() {
        return Err(ReferenceError::EmptyDataset);
    }
    let n_thetas = loglik_rows[0].len();
    let mut score = vec![0.0f64; n_thetas];
    for row in loglik_rows {
        for (s, &l) in score.iter_mut().zip(row) {
            *s += l;
        }
    }
    let mut best: Option<usize> = None;
    for (theta, &s) in score.iter().enumerate() {
        if s == f64::NEG_INFINITY || s.is_nan() {
            continue;
        }
        if best.map_or(true, |b| s > score[b]) {
            best = Some(theta);
        }
    }
    best.ok_or(ReferenceError::AllZeroLikelihood)
}

/// The nominal baseline: plug in the MLE and solve the resulting MDP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalSolution {
    pub theta_hat: usize,
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
}

/// Fits θ̂ by maximum likelihood over the finite parameter set and solves
/// the MDP under θ̂ by value iteration (sup-norm change ≤ 1e-8).
pub fn solve_nominal(
    model: &ModelSpec,
    loglik_rows: &[Vec<f64>],
) -> Result<NominalSolution, ReferenceError> {
    let theta_hat = mle_index(loglik_rows)?;
    let (values, policy) = value_iteration_under_theta(model, theta_hat, VI_TOL)?;
    Ok(NominalSolution { theta_hat, values, policy })
}

/// Convenience: log-likelihood rows for outcome-index observations drawn
/// from the model's own outcome alphabet.
pub fn outcome_loglik(model: &ModelSpec, outcomes: &[usize]) -> Vec<Vec<f64>> {
    outcomes
        .iter()
        .map(|&xi| (0..model.n_thetas()).map(|theta| model.f(xi, theta).ln()).collect())
        .collect()
}

/// [`solve_nominal`] for outcome-index datasets.
pub fn solve_nominal_from_outcomes(
    model: &ModelSpec,
    outcomes: &[usize],
) -> Result<NominalSolution, ReferenceError> {
    if outcomes.is_empty() {
        return Err(ReferenceError::EmptyDataset);
    }
    solve_nominal(model, &outcome_loglik(model, outcomes))
}

/// The distributionally robust baseline's solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrmdpSolution {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
}

/// Robust value iteration with an (s, a)-rectangular adversary over
/// `theta_subset`:
///
/// ```text
/// V(s) = min_a max_{θ ∈ subset} Σ_ξ f(ξ; θ) [ C(s,a,ξ) + γ V(g(s,a,ξ)) ],
/// ```
///
/// iterated to sup-norm change 1e-8, with the greedy robust policy.
pub fn solve_drmdp(
    model: &ModelSpec,
    theta_subset: &[usize],
) -> Result<DrmdpSolution, ReferenceError> {
    if theta_subset.is_empty() {
        return Err(ReferenceError::EmptySubset);
    }
    for &theta in theta_subset {
        if theta >= model.n_thetas() {
            return Err(ReferenceError::BadParameter(theta));
        }
    }
    let q = |state: usize, action: usize, v: &[f64]| -> f64 {
        theta_subset
            .iter()
            .map(|&theta| {
                let mut acc = 0.0;
                for xi in 0..model.n_xi() {
                    let fp = model.f(xi, theta);
                    if fp > 0.0 {
                        acc += fp
                            * (model.stage_cost(state, action, xi)
                                + model.discount * v[model.g(state, action, xi)]);
                    }
                }
                acc
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let mut v = vec![0.0; model.n_states];
    let mut sweeps: u64 = 0;
    loop {
        let mut delta: f64 = 0.0;
        for state in 0..model.n_states {
            let mut best = f64::INFINITY;
            for &action in &model.admissible[state] {
                let val = q(state, action, &v);
                if val < best {
                    best = val;
                }
            }
            delta = delta.max((best - v[state]).abs());
            v[state] = best;
        }
        sweeps += 1;
        if delta <= VI_TOL {
            break;
        }
        if sweeps >= MAX_VI_SWEEPS {
            return Err(ReferenceError::NoConvergence(sweeps));
        }
    }

    let policy = (0..model.n_states)
        .map(|state| {
            let mut best = (model.admissible[state][0], f64::INFINITY);
            for &action in &model.admissible[state] {
                let val = q(state, action, &v);
                if val < best.1 - 1e-12 {
                    best = (action, val);
                }
            }
            best.0
        })
        .collect();
    Ok(DrmdpSolution { values: v, policy })
}
