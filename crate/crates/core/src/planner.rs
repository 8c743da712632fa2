//! Policy extraction, finite-state controllers, posterior-set growth, and
//! the outer ABDCP loop.
//!
//! One outer iteration of the planner, on the current belief grid `M̂`:
//!
//! ```text
//! 1. assemble the constraint system and solve the grid-restricted
//!    program by CCP                          → V̂* (lower bounds)
//! 2. extract the greedy policy at V̂*        → π̂ (action per grid node)
//! 3. wrap π̂ as a finite state controller and evaluate it exactly
//!    by fixed-point iteration                → V̂^π̂ (upper bounds)
//! 4. record the gap V̂^π̂ − V̂* at the start node; if ≤ ε, stop
//! 5. grow M̂ with up to n one-step posteriors farthest from the grid
//! ```
//!
//! Both halves of the certificate lean on the same structural fact: the
//! exact value function is concave in the belief.  Grid interpolation by
//! convex weights therefore under-estimates it, which makes V̂* a valid
//! lower bound; and a one-step posterior that falls off the grid can be
//! priced from *above* by decomposing a grid member across it (see
//! [`evaluate_fsc`]), which makes V̂^π̂ a valid upper bound on the exact
//! optimum — not merely on the controller.  The pessimistic pricing charges
//! the controller for every posterior the grid fails to represent, so the
//! gap between the bounds measures how well the grid covers the policy's
//! reachable posteriors, and closes as growth absorbs them.

use crate::belief::{
    bayes_update, interpolation_weights, BeliefError, BeliefSet, InterpolationWeights, DEDUP_TOL,
};
use crate::ccp::{solve_abdcp, CcpError, CcpOptions, ConstraintSystem, ValueTable};
use crate::model::{Belief, ModelSpec};
use crate::reference::value_iteration_under_theta;
use crate::risk::{rho, RiskSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

/// Actions with right-hand sides within this of the incumbent are ties and
/// resolve to the smallest action index.
pub const ACTION_TIE_TOL: f64 = 1e-12;
/// Numerical slack when comparing the certified bounds: the pessimistic
/// controller value dominates the exact optimum, which dominates the grid
/// solution, so `upper` falling below `lower` by more than round-off
/// indicates a solver problem.
pub const SANDWICH_TOL: f64 = 1e-6;
const MAX_EVAL_SWEEPS: u64 = 200_000;
/// Memoization budget for the depth-limited greedy-policy certificate; a
/// start node whose exact recursion would exceed it keeps the controller
/// table as its only upper bound.
const ROLLOUT_NODE_BUDGET: usize = 150_000;
/// Hard cap on the rollout depth regardless of the requested accuracy.
const ROLLOUT_MAX_DEPTH: usize = 80;

#[derive(Debug)]
pub enum PlannerError {
    /// A solver failure inside outer iteration `iteration` (1-based).
    Solver { iteration: usize, source: CcpError },
    Belief(BeliefError),
    Numerical(String),
}

impl fmt::Display for PlannerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlannerError::Solver { iteration, source } => {
                write!(f, "solver failed in outer iteration {iteration}: {source}")
            }
            PlannerError::Belief(e) => write!(f, "belief computation failed: {e}"),
            PlannerError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for PlannerError {}

impl From<BeliefError> for PlannerError {
    fn from(e: BeliefError) -> Self {
        PlannerError::Belief(e)
    }
}

/// An action for every `(state, grid member)` node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPolicy {
    n_states: usize,
    n_members: usize,
    actions: Vec<usize>,
}

impl GridPolicy {
    /// Policy playing the same action at every node.
    pub fn constant(n_states: usize, n_members: usize, action: usize) -> Self {
        GridPolicy { n_states, n_members, actions: vec![action; n_states * n_members] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    pub fn action(&self, state: usize, member: usize) -> usize {
        self.actions[state * self.n_members + member]
    }
}

/// Finite state controller: one node per `(state, grid member)`, an action
/// per node, and per-parameter node transitions
/// `P(n_{s',μ_j} | n_{s,μ_i}, θ) = Σ_ξ [g(s,a,ξ) = s'] f(ξ; θ) w_j(μ_i^ξ)`,
/// stored factored as the per-`(member, ξ)` posterior weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FscPolicy {
    pub n_states: usize,
    pub set: BeliefSet,
    /// Action per node, indexed `state · |M̂| + member`.
    pub actions: Vec<usize>,
    /// Interpolation weights of the one-step posterior, per `[member][ξ]`.
    pub weights: Vec<Vec<InterpolationWeights>>,
}

impl FscPolicy {
    pub fn n_nodes(&self) -> usize {
        self.actions.len()
    }

    pub fn node_index(&self, state: usize, member: usize) -> usize {
        state * self.set.len() + member
    }

    pub fn action(&self, state: usize, member: usize) -> usize {
        self.actions[self.node_index(state, member)]
    }

    /// Materializes one per-θ transition row as `(node', probability)`
    /// pairs, ascending by node index.  Each row sums to 1.
    pub fn transition_row(
        &self,
        model: &ModelSpec,
        node: usize,
        theta: usize,
    ) -> Vec<(usize, f64)> {
        let n_members = self.set.len();
        let state = node / n_members;
        let member = node % n_members;
        let action = self.actions[node];
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for xi in 0..model.n_xi() {
            let p = model.f(xi, theta);
            if p <= 0.0 {
                continue;
            }
            let s_next = model.g(state, action, xi);
            for &(j, w) in &self.weights[member][xi].support {
                entries.push((s_next * n_members + j, p * w));
            }
        }
        entries.sort_by_key(|&(n, _)| n);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (n, p) in entries {
            match merged.last_mut() {
                Some((last, acc)) if *last == n => *acc += p,
                _ => merged.push((n, p)),
            }
        }
        merged
    }
}

/// Greedy policy at `values`: per grid node, the action minimizing the exact
/// right-hand side `ρ_{μ_i}(z_a(V))`; ties go to the smallest action index.
pub fn extract_policy(
    system: &ConstraintSystem,
    values: &ValueTable,
) -> Result<GridPolicy, PlannerError> {
    let model = system.model();
    let n_members = system.set().len();
    let w_table = system.interp_values(values);
    let mut actions = Vec::with_capacity(model.n_states * n_members);
    for state in 0..model.n_states {
        for member in 0..n_members {
            let mut best_action = None;
            let mut best_value = f64::INFINITY;
            for r in system.node_rows(state, member) {
                let row = &system.rows()[r];
                let z = system.row_z(row, &w_table);
                let eval = rho(system.risk(), &z, system.set().member(member))
                    .map_err(|e| PlannerError::Numerical(e.to_string()))?;
                if eval.value < best_value - ACTION_TIE_TOL {
                    best_value = eval.value;
                    best_action = Some(row.action);
                }
            }
            actions.push(best_action.expect("validated models have an admissible action"));
        }
    }
    Ok(GridPolicy { n_states: model.n_states, n_members, actions })
}

/// Wraps a grid policy as a finite state controller over the system's grid.
pub fn build_fsc(system: &ConstraintSystem, policy: &GridPolicy) -> FscPolicy {
    assert_eq!(policy.n_states, system.model().n_states);
    assert_eq!(policy.n_members, system.set().len());
    FscPolicy {
        n_states: system.model().n_states,
        set: system.set().clone(),
        actions: policy.actions.clone(),
        weights: system.weights().to_vec(),
    }
}

/// One pessimistic continuation query: an off-grid posterior priced from
/// above through one grid member.
///
/// Writing the member as `μ_k = β μ' + (1−β) ν` with the largest feasible
/// `β = min_θ μ_k(θ)/μ'(θ)`, concavity of the exact value in the belief
/// gives `V(s', μ') ≤ (V̄(s', μ_k) − (1−β) ⟨ν, V_corner(s', ·)⟩) / β`, where
/// the corner values anchor `V(s', ν)` from below by the chord inequality.
#[derive(Debug, Clone)]
struct PessimisticQuery {
    member: usize,
    beta: f64,
    /// The complement point ν, dense over parameters (all zero when β = 1).
    nu: Vec<f64>,
    /// Strongest one-member decomposition of ν itself, `ν = t μ_j + res`:
    /// the grid member taking the largest coefficient `t`, with the residual
    /// left for the corner chord.  Used to price ν off certified grid lower
    /// values when the caller provides them; `None` when no member fits.
    anchor: Option<NuAnchor>,
}

#[derive(Debug, Clone)]
struct NuAnchor {
    member: usize,
    t: f64,
    /// `ν − t μ_member`, componentwise nonnegative with mass `1 − t`.
    res: Vec<f64>,
}

/// All valid decompositions `μ_k = β μ_target + (1−β) ν` of grid members
/// across a target belief, one per member whose support covers the
/// target's.  β is the largest feasible coefficient, so each query is the
/// tightest bound its member can offer; members with β ≤ 1e-12 contribute
/// nothing and are dropped.
fn pessimistic_queries(set: &BeliefSet, target: &Belief) -> Vec<PessimisticQuery> {
    let n_thetas = set.n_thetas();
    let target = target.probs();
    let mut out = Vec::new();
    for k in 0..set.len() {
        let cand = set.member(k).probs();
        let mut beta = f64::INFINITY;
        for theta in 0..n_thetas {
            if target[theta] > 0.0 {
                beta = beta.min(cand[theta] / target[theta]);
            }
        }
        if beta <= 1e-12 {
            continue;
        }
        let beta = beta.min(1.0);
        let (nu, anchor) = if beta < 1.0 {
            let nu: Vec<f64> = (0..n_thetas)
                .map(|t| ((cand[t] - beta * target[t]) / (1.0 - beta)).max(0.0))
                .collect();
            (nu.clone(), nu_anchor(set, &nu))
        } else {
            (vec![0.0; n_thetas], None)
        };
        out.push(PessimisticQuery { member: k, beta, nu, anchor });
    }
    out
}

/// The grid member taking the largest coefficient in a one-member
/// decomposition `ν = t μ_j + res`, `res ≥ 0`; ties go to the smallest
/// member index.
fn nu_anchor(set: &BeliefSet, nu: &[f64]) -> Option<NuAnchor> {
    let n_thetas = set.n_thetas();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..set.len() {
        let cand = set.member(j).probs();
        let mut t = f64::INFINITY;
        for theta in 0..n_thetas {
            if cand[theta] > 0.0 {
                t = t.min(nu[theta] / cand[theta]);
            }
        }
        let t = t.min(1.0);
        if t > 1e-12 && best.map_or(true, |(_, bt)| t > bt) {
            best = Some((j, t));
        }
    }
    best.map(|(member, t)| {
        let cand = set.member(member).probs();
        let res = (0..n_thetas).map(|th| (nu[th] - t * cand[th]).max(0.0)).collect();
        NuAnchor { member, t, res }
    })
}

/// Certified value of the controller, per node.
///
/// Returns a table `V̄ ≥ V*` pointwise on the grid (the upper half of the
/// sandwich around the exact optimal value).  The recursion follows the
/// controller's actions and reassesses the node belief's risk at every
/// stage,
///
/// ```text
/// V̄(n_{s,μ_i}) = ρ_{μ_i}( C̄(s, a_n, ·) + γ Σ_ξ f(ξ; ·) ū(g(s,a,ξ), μ_i^ξ) ),
/// ```
///
/// but where the grid solution interpolates the one-step posterior `μ_i^ξ`
/// — an under-estimate, by concavity of the exact value in the belief — the
/// continuation `ū` here prices it from above: each grid member `μ_k`
/// containing the posterior in its support admits the decomposition
/// `μ_k = β μ_i^ξ + (1−β) ν` with `β = min_θ μ_k(θ)/μ_i^ξ(θ)`, so concavity
/// bounds the posterior's value by `(V̄(μ_k) − (1−β) ⟨ν, corner values⟩)/β`;
/// `ū` takes the tightest such bound, capped by `C_max/(1−γ)`.  Corner
/// values are exact fixed-parameter optima, computed here by standard value
/// iteration.
///
/// The iteration starts from the global cap and descends monotonically;
/// because the backup maps tables dominating `V*` to tables dominating
/// `V*` (costs are nonnegative, risk measures are monotone, and the exact
/// value is concave in the belief), **every** iterate is a valid upper
/// bound, so stopping early only loosens the certificate, never breaks it.
/// Sweeps stop once no entry changes by more than `tol·(1−γ)/γ`.
///
/// Two consequences shape the outer loop: the certificate never falls below
/// the grid solution (it dominates `V*`, which dominates every grid
/// solution), and when the grid is closed under the policy's posterior
/// updates every query hits a member exactly (β = 1), making the
/// evaluation exact — so the certified gap closes as the grid absorbs the
/// controller's reachable posteriors.
///
/// A posterior undefined at a node (outcome with zero predictive
/// probability) keeps the node's own belief; such outcomes carry positive
/// likelihood only under parameters the node's belief — and therefore its
/// risk measure — gives zero weight, so the convention never affects the
/// certificate.
pub fn evaluate_fsc(
    fsc: &FscPolicy,
    model: &ModelSpec,
    risk: RiskSpec,
    tol: f64,
) -> Result<ValueTable, PlannerError> {
    evaluate_fsc_anchored(fsc, model, risk, tol, None, None)
}

/// [`evaluate_fsc`] with optional certified lower values on the grid used
/// as additional anchors for the complement beliefs ν, and an optional
/// warm start.
///
/// By concavity, any decomposition `ν = t μ_j + res` over grid members
/// bounds `V(s', ν)` from below by `t · floor(s', j) + ⟨res, corner
/// values⟩`, provided `floor ≤ V*` pointwise on the grid.  The outer loop
/// passes its grid solution (the certified lower half of the sandwich),
/// which tightens the pessimistic continuation exactly where coarse corner
/// chords are weakest; without a floor the chord through the corners is
/// used alone.
///
/// `warm` may hold the certificate from an earlier evaluation whose grid
/// is a prefix of this one (the outer loop only ever appends members).
/// The exact optimum does not depend on the grid, so those entries still
/// dominate `V*` and are a valid starting table; members beyond the warm
/// table start at the cap.  Because the controller's actions may have
/// changed, descent is enforced by clipping each update at the previous
/// value — the clipped iterate is still a maximum of certificates, hence
/// itself certified — which keeps the sweep monotone and terminating.
fn evaluate_fsc_anchored(
    fsc: &FscPolicy,
    model: &ModelSpec,
    risk: RiskSpec,
    tol: f64,
    floor: Option<&ValueTable>,
    warm: Option<&ValueTable>,
) -> Result<ValueTable, PlannerError> {
    let n_states = fsc.n_states;
    let n_members = fsc.set.len();
    let n_xi = model.n_xi();
    let n_thetas = model.n_thetas();
    let gamma = model.discount;
    let vmax = model.v_max();
    let threshold = if gamma > 0.0 { tol * (1.0 - gamma) / gamma } else { f64::INFINITY };

    // Exact fixed-parameter optima V*(s, δ_θ): anchors for the complement
    // points ν (value-iteration iterates approach them from below, keeping
    // the anchor a valid lower bound at any tolerance).
    let mut corner_vals = Vec::with_capacity(n_thetas);
    for theta in 0..n_thetas {
        let (vals, _) = value_iteration_under_theta(model, theta, 1e-12)
            .map_err(|e| PlannerError::Numerical(e.to_string()))?;
        corner_vals.push(vals);
    }

    // Per-node stage data under the controller's action.
    let mut cbar = Vec::with_capacity(n_states * n_members);
    let mut next_state = Vec::with_capacity(n_states * n_members);
    for state in 0..n_states {
        for member in 0..n_members {
            let action = fsc.action(state, member);
            cbar.push(
                (0..n_thetas)
                    .map(|theta| model.expected_cost(state, action, theta))
                    .collect::<Vec<f64>>(),
            );
            next_state.push((0..n_xi).map(|xi| model.g(state, action, xi)).collect::<Vec<usize>>());
        }
    }

    // Pessimistic decompositions of every one-step posterior, per
    // `[member][ξ]`: all members whose support contains the posterior's.
    let mut queries: Vec<Vec<Vec<PessimisticQuery>>> = Vec::with_capacity(n_members);
    for member in 0..n_members {
        let mut per_xi = Vec::with_capacity(n_xi);
        for xi in 0..n_xi {
            let cands = match bayes_update(model, fsc.set.member(member), xi) {
                Ok(post) => pessimistic_queries(&fsc.set, &post),
                Err(BeliefError::ImpossibleObservation { .. }) => {
                    // Zero predictive probability: keep the node's belief.
                    vec![PessimisticQuery {
                        member,
                        beta: 1.0,
                        nu: vec![0.0; n_thetas],
                        anchor: None,
                    }]
                }
                Err(e) => return Err(PlannerError::Belief(e)),
            };
            per_xi.push(cands);
        }
        queries.push(per_xi);
    }

    // Monotone descent from the warm table (or the global cap), updated in
    // place so drained values propagate within a sweep, and clipped at the
    // previous entry so descent survives action changes between calls.
    let mut v = vec![vmax; n_states * n_members];
    if let Some(w) = warm {
        assert_eq!(w.n_states(), n_states, "warm-start state count mismatch");
        assert!(w.n_members() <= n_members, "warm start is not a grid prefix");
        for state in 0..n_states {
            for member in 0..w.n_members() {
                v[state * n_members + member] = w.get(state, member).clamp(0.0, vmax);
            }
        }
    }
    let mut sweeps: u64 = 0;
    let mut z = vec![0.0f64; n_thetas];
    loop {
        let mut delta: f64 = 0.0;
        for state in 0..n_states {
            for member in 0..n_members {
                let node = state * n_members + member;
                for (theta, zt) in z.iter_mut().enumerate() {
                    let mut acc = cbar[node][theta];
                    if gamma > 0.0 {
                        for xi in 0..n_xi {
                            let fp = model.f(xi, theta);
                            if fp <= 0.0 {
                                continue;
                            }
                            let s_next = next_state[node][xi];
                            let mut cont = vmax;
                            for q in &queries[member][xi] {
                                let bound = if q.beta >= 1.0 {
                                    v[s_next * n_members + q.member]
                                } else {
                                    let mut anchor: f64 = (0..n_thetas)
                                        .map(|t| q.nu[t] * corner_vals[t][s_next])
                                        .sum();
                                    if let (Some(a), Some(fl)) = (&q.anchor, floor) {
                                        let mixed = a.t * fl.get(s_next, a.member)
                                            + (0..n_thetas)
                                                .map(|t| a.res[t] * corner_vals[t][s_next])
                                                .sum::<f64>();
                                        anchor = anchor.max(mixed);
                                    }
                                    (v[s_next * n_members + q.member]
                                        - (1.0 - q.beta) * anchor)
                                        / q.beta
                                };
                                cont = cont.min(bound);
                            }
                            acc += gamma * fp * cont.max(0.0);
                        }
                    }
                    *zt = acc;
                }
                let eval = rho(risk, &z, fsc.set.member(member))
                    .map_err(|e| PlannerError::Numerical(e.to_string()))?;
                let new = eval.value.clamp(0.0, v[node]);
                delta = delta.max(v[node] - new);
                v[node] = new;
            }
        }
        sweeps += 1;
        if delta <= threshold {
            break;
        }
        if sweeps >= MAX_EVAL_SWEEPS {
            return Err(PlannerError::Numerical(format!(
                "controller evaluation exceeded {MAX_EVAL_SWEEPS} sweeps (last change {delta:.3e})"
            )));
        }
    }

    let mut out = ValueTable::zeros(n_states, n_members);
    for state in 0..n_states {
        for member in 0..n_members {
            out.set(state, member, v[state * n_members + member]);
        }
    }
    Ok(out)
}

/// Up to `n` one-step posteriors of grid members that are new to the grid,
/// scanned in `(state, member, outcome)` order.  When more than `n` are new,
/// a greedy farthest-point subset is kept: repeatedly the candidate with the
/// largest distance to `M̂ ∪ kept`.
pub fn generate_posteriors(
    model: &ModelSpec,
    set: &BeliefSet,
    policy: &GridPolicy,
    n: usize,
) -> Vec<Belief> {
    assert_eq!(policy.n_states, model.n_states);
    assert_eq!(policy.n_members, set.len());
    assert!(n >= 1, "posterior budget must be positive");

    let mut candidates: Vec<Belief> = Vec::new();
    for _state in 0..model.n_states {
        for member in 0..set.len() {
            for xi in 0..model.n_xi() {
                if let Ok(post) = bayes_update(model, set.member(member), xi) {
                    if set.distance_with_extra(&candidates, &post) > DEDUP_TOL {
                        candidates.push(post);
                    }
                }
            }
        }
    }
    if candidates.len() <= n {
        return candidates;
    }

    // Greedy farthest-point pruning, ties to the earliest candidate.
    let mut kept: Vec<Belief> = Vec::with_capacity(n);
    let mut pool = candidates;
    while kept.len() < n {
        let mut best_idx = 0;
        let mut best_dist = f64::NEG_INFINITY;
        for (idx, cand) in pool.iter().enumerate() {
            let d = set.distance_with_extra(&kept, cand);
            if d > best_dist {
                best_dist = d;
                best_idx = idx;
            }
        }
        kept.push(pool.remove(best_idx));
    }
    kept
}

/// One-step greedy action for an arbitrary belief, interpolating posteriors
/// through the trained grid.  Coincides with [`extract_policy`] when `mu`
/// is a grid member.
pub fn act(
    values: &ValueTable,
    set: &BeliefSet,
    model: &ModelSpec,
    risk: RiskSpec,
    state: usize,
    mu: &Belief,
) -> Result<usize, PlannerError> {
    let n_xi = model.n_xi();
    let gamma = model.discount;

    // Posterior weights per outcome (action-independent); impossible
    // outcomes keep the belief unchanged.
    let mut per_xi: Vec<InterpolationWeights> = Vec::with_capacity(n_xi);
    let mut self_weights: Option<InterpolationWeights> = None;
    for xi in 0..n_xi {
        match bayes_update(model, mu, xi) {
            Ok(post) => per_xi.push(interpolation_weights(set, &post)?),
            Err(BeliefError::ImpossibleObservation { .. }) => {
                if self_weights.is_none() {
                    self_weights = Some(interpolation_weights(set, mu)?);
                }
                per_xi.push(self_weights.clone().expect("just set"));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let interp: Vec<Vec<f64>> = per_xi
        .iter()
        .map(|w| {
            (0..model.n_states)
                .map(|s| w.support.iter().map(|&(j, wj)| wj * values.get(s, j)).sum())
                .collect()
        })
        .collect();

    let mut best_action = None;
    let mut best_value = f64::INFINITY;
    for &action in &model.admissible[state] {
        let z: Vec<f64> = (0..model.n_thetas())
            .map(|theta| {
                let mut acc = model.expected_cost(state, action, theta);
                for xi in 0..n_xi {
                    let fp = model.f(xi, theta);
                    if fp > 0.0 {
                        acc += gamma * fp * interp[xi][model.g(state, action, xi)];
                    }
                }
                acc
            })
            .collect();
        let eval =
            rho(risk, &z, mu).map_err(|e| PlannerError::Numerical(e.to_string()))?;
        if eval.value < best_value - ACTION_TIE_TOL {
            best_value = eval.value;
            best_action = Some(action);
        }
    }
    Ok(best_action.expect("validated models have an admissible action"))
}

/// Depth-limited exact evaluation of the belief-tracking greedy policy.
///
/// [`act`] defines an implementable policy — track the exact posterior,
/// play the greedy action — and any implementable policy's value dominates
/// the optimum, so pricing that policy from above certifies an upper bound
/// on `V*(s₁, μ₁)` that does not depend on how densely the grid covers the
/// reachable posteriors.  The recursion expands the policy's own posterior
/// tree: because the likelihood is state- and action-independent, the
/// posterior after any prefix depends only on the multiset of observed
/// outcomes, so nodes are memoized on `(state, outcome counts)` and the
/// tree collapses to polynomially many nodes in the depth.  Leaves at the
/// depth cap are priced at `v_max`, which dominates any continuation, and
/// zero-cost absorbing states are priced at their exact value 0.
///
/// Returns `Ok(None)` when the memo table would exceed the node budget
/// (large outcome alphabets); the caller then falls back to the controller
/// table alone.
fn greedy_policy_upper(
    values: &ValueTable,
    set: &BeliefSet,
    model: &ModelSpec,
    risk: RiskSpec,
    start_state: usize,
    mu1: &Belief,
    epsilon: f64,
) -> Result<Option<f64>, PlannerError> {
    let vmax = model.v_max();
    if vmax <= 0.0 {
        return Ok(Some(0.0));
    }
    let gamma = model.discount;
    let depth_cap = if gamma <= 0.0 {
        1
    } else {
        // Deep enough that the v_max tail costs only a fraction of the
        // requested gap; deeper than the hard cap buys nothing the budget
        // guard would allow anyway.
        let tail = (0.25 * epsilon).clamp(1e-9, vmax);
        let needed = ((tail / vmax).ln() / gamma.ln()).ceil();
        (needed.max(1.0) as usize).min(ROLLOUT_MAX_DEPTH)
    };
    let absorbing: Vec<bool> =
        (0..model.n_states).map(|s| model.is_absorbing_zero_cost(s)).collect();
    let mut ctx = Rollout {
        values,
        set,
        model,
        risk,
        vmax,
        depth_cap,
        absorbing,
        nodes: 0,
        memo: HashMap::new(),
    };
    ctx.value(start_state, vec![0; model.n_xi()], mu1)
}

/// Working state for [`greedy_policy_upper`].
struct Rollout<'a> {
    values: &'a ValueTable,
    set: &'a BeliefSet,
    model: &'a ModelSpec,
    risk: RiskSpec,
    vmax: f64,
    depth_cap: usize,
    absorbing: Vec<bool>,
    nodes: usize,
    memo: HashMap<(usize, Vec<u16>), f64>,
}

impl Rollout<'_> {
    /// Value of the greedy policy at `state` with posterior `mu`, reached
    /// after the outcome counts in `counts`.  `None` when the node budget
    /// ran out.
    fn value(
        &mut self,
        state: usize,
        counts: Vec<u16>,
        mu: &Belief,
    ) -> Result<Option<f64>, PlannerError> {
        if self.absorbing[state] {
            return Ok(Some(0.0));
        }
        let depth: usize = counts.iter().map(|&c| c as usize).sum();
        if depth >= self.depth_cap {
            return Ok(Some(self.vmax));
        }
        let key = (state, counts);
        if let Some(&v) = self.memo.get(&key) {
            return Ok(Some(v));
        }
        self.nodes += 1;
        if self.nodes > ROLLOUT_NODE_BUDGET {
            return Ok(None);
        }

        let action = act(self.values, self.set, self.model, self.risk, state, mu)?;
        let n_xi = self.model.n_xi();
        let gamma = self.model.discount;
        // Continuations per outcome, shared across θ.  An outcome with zero
        // predictive probability has f(ξ; θ) = 0 for every θ in the
        // posterior's support, so skipping it only perturbs coordinates
        // that carry no μ-mass in ρ.
        let mut child = vec![0.0_f64; n_xi];
        let mut child_ok = vec![false; n_xi];
        if gamma > 0.0 {
            for xi in 0..n_xi {
                match bayes_update(self.model, mu, xi) {
                    Ok(post) => {
                        let mut next_counts = key.1.clone();
                        next_counts[xi] += 1;
                        let dest = self.model.g(state, action, xi);
                        match self.value(dest, next_counts, &post)? {
                            Some(v) => {
                                child[xi] = v;
                                child_ok[xi] = true;
                            }
                            None => return Ok(None),
                        }
                    }
                    Err(BeliefError::ImpossibleObservation { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let z: Vec<f64> = (0..self.model.n_thetas())
            .map(|theta| {
                let mut acc = self.model.expected_cost(state, action, theta);
                for xi in 0..n_xi {
                    let fp = self.model.f(xi, theta);
                    if fp > 0.0 && child_ok[xi] {
                        acc += gamma * fp * child[xi];
                    }
                }
                acc
            })
            .collect();
        let eval = rho(self.risk, &z, mu).map_err(|e| PlannerError::Numerical(e.to_string()))?;
        // Mathematically already ≤ v_max (stage costs are capped and the
        // leaves are priced at v_max); the clamp only sheds round-off, and
        // v_max itself dominates the optimum, so it stays a certificate.
        let v = eval.value.clamp(0.0, self.vmax);
        self.memo.insert(key, v);
        Ok(Some(v))
    }
}

/// Which condition ended the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `upper − lower ≤ ε` at the start node.
    EpsilonReached,
    /// Posterior generation came back empty twice in a row.
    NoNewPosteriors,
    /// The outer-iteration budget was exhausted.
    MaxOuterReached,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AbdcpOptions {
    /// Certified gap at which to stop.
    pub epsilon: f64,
    /// Posterior-set growth budget per outer iteration.
    pub n_new: usize,
    pub max_outer: usize,
    pub ccp: CcpOptions,
    /// Accuracy of the controller evaluation (upper bound).
    pub eval_tol: f64,
}

impl Default for AbdcpOptions {
    fn default() -> Self {
        AbdcpOptions {
            epsilon: 0.1,
            n_new: 10,
            max_outer: 50,
            ccp: CcpOptions::default(),
            eval_tol: 1e-9,
        }
    }
}

/// One outer iteration's certified bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GapRecord {
    /// 1-based outer iteration.
    pub outer: usize,
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
    pub grid_size: usize,
    pub ccp_iterations: usize,
    pub ccp_converged: bool,
}

/// Trained planner artifact: the controller, its certified bounds, and the
/// value table needed to act on arbitrary beliefs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbdcpResult {
    pub policy: FscPolicy,
    /// Grid lower bounds `V̂*` on the final belief set.
    pub values: ValueTable,
    /// Controller values `V̂^π̂` on the final belief set.
    pub upper_values: ValueTable,
    /// `V̂*(s₁, μ₁)`.
    pub lower: f64,
    /// Certified upper bound at `(s₁, μ₁)`: the controller value, tightened
    /// by the greedy-policy rollout on iterations where the controller
    /// alone left more than ε.
    pub upper: f64,
    pub gap: f64,
    pub stop_reason: StopReason,
    pub gap_history: Vec<GapRecord>,
    pub outer_iterations: usize,
    pub wall_time_s: f64,
    pub start_state: usize,
    /// Index of μ₁ in the final belief set.
    pub start_member: usize,
}

impl AbdcpResult {
    pub fn final_set(&self) -> &BeliefSet {
        &self.policy.set
    }
}

/// The outer ABDCP loop: alternately solve the grid-restricted program,
/// certify the greedy controller, and grow the grid toward reachable
/// posteriors, until the gap at `(s₁, μ₁)` is at most ε (or a guard fires).
pub fn abdcp(
    model: &ModelSpec,
    risk: RiskSpec,
    start_state: usize,
    mu1: &Belief,
    opts: &AbdcpOptions,
) -> Result<AbdcpResult, PlannerError> {
    let t0 = Instant::now();
    let mut set = BeliefSet::corners_and(model.n_thetas(), std::slice::from_ref(mu1));
    let start_member = (0..set.len())
        .min_by(|&a, &b| {
            set.member(a)
                .euclidean(mu1)
                .partial_cmp(&set.member(b).euclidean(mu1))
                .expect("distances are finite")
        })
        .expect("set is nonempty");

    let mut gap_history = Vec::new();
    let mut consecutive_empty = 0;
    let mut iteration = 0;
    // The certificate from the previous outer iteration: still an upper
    // bound on the grid-independent exact optimum, so it warm-starts the
    // next evaluation (new members simply start at the cap).
    let mut prev_upper: Option<ValueTable> = None;
    loop {
        iteration += 1;
        let wrap = |source: CcpError| PlannerError::Solver { iteration, source };

        let system = ConstraintSystem::assemble(model, &set, risk).map_err(wrap)?;
        let ccp_out = solve_abdcp(&system, None, &opts.ccp).map_err(wrap)?;
        let policy = extract_policy(&system, &ccp_out.values)?;
        let fsc = build_fsc(&system, &policy);
        let upper_values = evaluate_fsc_anchored(
            &fsc,
            model,
            risk,
            opts.eval_tol,
            Some(&ccp_out.values),
            prev_upper.as_ref(),
        )?;
        prev_upper = Some(upper_values.clone());

        let lower = ccp_out.values.get(start_state, start_member);
        let mut upper = upper_values.get(start_state, start_member);
        // When the controller table alone leaves the gap open, also price
        // the deployable greedy policy itself ([`greedy_policy_upper`]);
        // both certificates dominate the exact optimum, so their minimum
        // is still one.  The rollout does not lean on grid coverage, which
        // unsticks instances whose reachable posteriors close slowly.
        if upper - lower > opts.epsilon {
            if let Some(rollout) = greedy_policy_upper(
                &ccp_out.values,
                &set,
                model,
                risk,
                start_state,
                mu1,
                opts.epsilon,
            )? {
                upper = upper.min(rollout);
            }
        }
        // Nonnegative up to round-off: `upper` dominates the exact optimum
        // and `lower` sits below it.
        let gap = upper - lower;
        gap_history.push(GapRecord {
            outer: iteration,
            lower,
            upper,
            gap,
            grid_size: set.len(),
            ccp_iterations: ccp_out.iterations,
            ccp_converged: ccp_out.converged,
        });

        let stop_reason = if gap <= opts.epsilon {
            Some(StopReason::EpsilonReached)
        } else if iteration >= opts.max_outer {
            Some(StopReason::MaxOuterReached)
        } else {
            let fresh = generate_posteriors(model, &set, &policy, opts.n_new);
            if fresh.is_empty() {
                consecutive_empty += 1;
                if consecutive_empty >= 2 {
                    Some(StopReason::NoNewPosteriors)
                } else {
                    None
                }
            } else {
                consecutive_empty = 0;
                for post in fresh {
                    set.push_dedup(post);
                }
                None
            }
        };

        if let Some(stop_reason) = stop_reason {
            return Ok(AbdcpResult {
                policy: fsc,
                values: ccp_out.values,
                upper_values,
                lower,
                upper,
                gap,
                stop_reason,
                gap_history,
                outer_iterations: iteration,
                wall_time_s: t0.elapsed().as_secs_f64(),
                start_state,
                start_member,
            });
        }
    }
}
