//! Immutable BR-MDP problem data.
//!
//! A model couples a finite controlled system `s' = g(s, a, ξ)` with a
//! per-parameter likelihood `f(ξ; θ)` over a finite randomness support Ξ and
//! a finite parameter grid Θ.  Stage costs `C(s, a, ξ)` are nonnegative and
//! the discount γ lies in `[0, 1)`.  States, actions, outcomes, and
//! parameters are all dense integer indices; [`ParamSpace`] and the outcome
//! feature table give them numeric meaning.
//!
//! Everything in this module is a pure function of its inputs: specs are
//! deeply immutable once constructed and safe to share across threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance under which a belief entry may dip negative before it is
/// clamped to zero (guards against accumulated floating-point error).
pub const BELIEF_NEG_TOL: f64 = 1e-12;
/// Tolerance on the total mass of a belief.
pub const BELIEF_SUM_TOL: f64 = 1e-9;
/// Tolerance on per-θ likelihood normalization.
pub const LIKELIHOOD_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("belief entry {index} is {value}, below -{tol}", tol = BELIEF_NEG_TOL)]
    NegativeBeliefEntry { index: usize, value: f64 },
    #[error("belief mass {sum} differs from 1 by more than {tol}", tol = BELIEF_SUM_TOL)]
    BeliefMass { sum: f64 },
    #[error("belief has {got} entries, parameter grid has {want}")]
    BeliefLength { got: usize, want: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Finite candidate grid for the unknown parameter θ.
///
/// Each candidate is a real vector; components are interpreted by the
/// environment that built the model (e.g. per-road traffic rates, per-item
/// demand rates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub thetas: Vec<Vec<f64>>,
}

impl ParamSpace {
    pub fn new(thetas: Vec<Vec<f64>>) -> Self {
        ParamSpace { thetas }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// Posterior distribution over the parameter grid.
///
/// Entries are clamped at `-1e-12` (anything above that but below zero is
/// treated as zero) and must sum to one within `1e-9`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Belief(Vec<f64>);

impl Belief {
    /// Validates and normalizes raw probabilities into a belief.
    ///
    /// Entries in `[-1e-12, 0)` are clamped to zero; entries below that or a
    /// total mass off by more than `1e-9` are errors.
    pub fn new(raw: Vec<f64>) -> Result<Self, ModelError> {
        if raw.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite("belief".into()));
        }
        let mut probs = raw;
        for (i, p) in probs.iter_mut().enumerate() {
            if *p < 0.0 {
                if *p < -BELIEF_NEG_TOL {
                    return Err(ModelError::NegativeBeliefEntry { index: i, value: *p });
                }
                *p = 0.0;
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > BELIEF_SUM_TOL {
            return Err(ModelError::BeliefMass { sum });
        }
        Ok(Belief(probs))
    }

    /// Point mass on candidate `theta_idx` of a `dim`-point grid.
    pub fn corner(dim: usize, theta_idx: usize) -> Self {
        let mut probs = vec![0.0; dim];
        probs[theta_idx] = 1.0;
        Belief(probs)
    }

    /// Uniform belief over `dim` candidates.
    pub fn uniform(dim: usize) -> Self {
        Belief(vec![1.0 / dim as f64; dim])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Euclidean distance to another belief of the same dimension.
    pub fn euclidean(&self, other: &Belief) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Index of the point mass if this belief is (numerically) a corner.
    pub fn corner_index(&self, tol: f64) -> Option<usize> {
        self.0.iter().position(|&p| (p - 1.0).abs() <= tol)
    }
}

/// A state of the augmented decision process: system state plus posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub state: usize,
    pub belief: Belief,
}

/// One diagnostic produced by [`ModelSpec::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LikelihoodNotNormalized { theta: usize, sum: f64 },
    NegativeLikelihood { theta: usize, xi: usize, value: f64 },
    NegativeCost { state: usize, action: usize, xi: usize, value: f64 },
    NonFiniteCost { state: usize, action: usize, xi: usize },
    TransitionOutOfRange { state: usize, action: usize, xi: usize, dest: usize },
    DiscountOutOfRange { discount: f64 },
    NoStates,
    NoOutcomes,
    NoParameters,
    NoAdmissibleAction { state: usize },
    AdmissibleActionOutOfRange { state: usize, action: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::LikelihoodNotNormalized { theta, sum } => {
                write!(f, "likelihood row for theta {theta} sums to {sum}, expected 1")
            }
            Violation::NegativeLikelihood { theta, xi, value } => {
                write!(f, "likelihood f(xi={xi}; theta={theta}) = {value} is negative")
            }
            Violation::NegativeCost { state, action, xi, value } => {
                write!(f, "cost C(s={state}, a={action}, xi={xi}) = {value} is negative")
            }
            Violation::NonFiniteCost { state, action, xi } => {
                write!(f, "cost C(s={state}, a={action}, xi={xi}) is not finite")
            }
            Violation::TransitionOutOfRange { state, action, xi, dest } => {
                write!(f, "transition g(s={state}, a={action}, xi={xi}) = {dest} is not a state")
            }
            Violation::DiscountOutOfRange { discount } => {
                write!(f, "discount {discount} outside [0, 1)")
            }
            Violation::NoStates => write!(f, "model has no states"),
            Violation::NoOutcomes => write!(f, "model has no randomness outcomes"),
            Violation::NoParameters => write!(f, "model has no parameter candidates"),
            Violation::NoAdmissibleAction { state } => {
                write!(f, "state {state} has no admissible action")
            }
            Violation::AdmissibleActionOutOfRange { state, action } => {
                write!(f, "state {state} lists admissible action {action} out of range")
            }
        }
    }
}

/// Complete, immutable BR-MDP instance.
///
/// Tables are stored flat in row-major order; `transition` and `cost` are
/// indexed by `(s * n_actions + a) * n_xi + xi` and carry meaningful entries
/// only for admissible `(s, a)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Sorted admissible action indices per state.
    pub admissible: Vec<Vec<usize>>,
    pub params: ParamSpace,
    /// Feature vector per outcome (informational; environments use it to
    /// describe what each ξ index encodes).
    pub xi_support: Vec<Vec<f64>>,
    /// `likelihood[theta][xi] = f(ξ; θ)`, per-θ normalized.
    pub likelihood: Vec<Vec<f64>>,
    /// Flat `g(s, a, ξ)` table; `usize::MAX` marks inadmissible `(s, a)`.
    pub transition: Vec<usize>,
    /// Flat `C(s, a, ξ)` table; zero for inadmissible `(s, a)`.
    pub cost: Vec<f64>,
    pub discount: f64,
}

impl ModelSpec {
    /// Builds a spec, checking table dimensions (content diagnostics are
    /// reported separately by [`ModelSpec::validate`]).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        admissible: Vec<Vec<usize>>,
        params: ParamSpace,
        xi_support: Vec<Vec<f64>>,
        likelihood: Vec<Vec<f64>>,
        transition: Vec<usize>,
        cost: Vec<f64>,
        discount: f64,
    ) -> Result<Self, ModelError> {
        let n_xi = xi_support.len();
        if admissible.len() != n_states {
            return Err(ModelError::Dimension(format!(
                "admissible lists: {} for {} states",
                admissible.len(),
                n_states
            )));
        }
        if likelihood.len() != params.len() {
            return Err(ModelError::Dimension(format!(
                "likelihood rows: {} for {} parameters",
                likelihood.len(),
                params.len()
            )));
        }
        if let Some(row) = likelihood.iter().find(|row| row.len() != n_xi) {
            return Err(ModelError::Dimension(format!(
                "likelihood row has {} entries for {} outcomes",
                row.len(),
                n_xi
            )));
        }
        let table = n_states * n_actions * n_xi;
        if transition.len() != table || cost.len() != table {
            return Err(ModelError::Dimension(format!(
                "transition/cost tables sized {}/{}, expected {}",
                transition.len(),
                cost.len(),
                table
            )));
        }
        let mut admissible = admissible;
        for list in &mut admissible {
            list.sort_unstable();
            list.dedup();
        }
        Ok(ModelSpec {
            n_states,
            n_actions,
            admissible,
            params,
            xi_support,
            likelihood,
            transition,
            cost,
            discount,
        })
    }

    pub fn n_xi(&self) -> usize {
        self.xi_support.len()
    }

    pub fn n_thetas(&self) -> usize {
        self.params.len()
    }

    #[inline]
    fn flat(&self, s: usize, a: usize, xi: usize) -> usize {
        (s * self.n_actions + a) * self.n_xi() + xi
    }

    /// Next state under `(s, a, ξ)`.
    #[inline]
    pub fn g(&self, s: usize, a: usize, xi: usize) -> usize {
        self.transition[self.flat(s, a, xi)]
    }

    /// Stage cost of `(s, a, ξ)`.
    #[inline]
    pub fn stage_cost(&self, s: usize, a: usize, xi: usize) -> f64 {
        self.cost[self.flat(s, a, xi)]
    }

    /// Likelihood `f(ξ; θ)`.
    #[inline]
    pub fn f(&self, xi: usize, theta: usize) -> f64 {
        self.likelihood[theta][xi]
    }

    /// Scans every table entry and reports all violations found (an empty
    /// list means the spec is valid).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.n_states == 0 {
            out.push(Violation::NoStates);
        }
        if self.n_xi() == 0 {
            out.push(Violation::NoOutcomes);
        }
        if self.params.is_empty() {
            out.push(Violation::NoParameters);
        }
        if !(0.0..1.0).contains(&self.discount) || !self.discount.is_finite() {
            out.push(Violation::DiscountOutOfRange { discount: self.discount });
        }
        for (theta, row) in self.likelihood.iter().enumerate() {
            for (xi, &p) in row.iter().enumerate() {
                if p < 0.0 || !p.is_finite() {
                    out.push(Violation::NegativeLikelihood { theta, xi, value: p });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > LIKELIHOOD_SUM_TOL {
                out.push(Violation::LikelihoodNotNormalized { theta, sum });
            }
        }
        for (state, actions) in self.admissible.iter().enumerate() {
            if actions.is_empty() {
                out.push(Violation::NoAdmissibleAction { state });
            }
            for &action in actions {
                if action >= self.n_actions {
                    out.push(Violation::AdmissibleActionOutOfRange { state, action });
                    continue;
                }
                for xi in 0..self.n_xi() {
                    let dest = self.g(state, action, xi);
                    if dest >= self.n_states {
                        out.push(Violation::TransitionOutOfRange {
                            state,
                            action,
                            xi,
                            dest,
                        });
                    }
                    let c = self.stage_cost(state, action, xi);
                    if !c.is_finite() {
                        out.push(Violation::NonFiniteCost { state, action, xi });
                    } else if c < 0.0 {
                        out.push(Violation::NegativeCost { state, action, xi, value: c });
                    }
                }
            }
        }
        out
    }

    /// Expected one-step cost `Σ_ξ f(ξ; θ) C(s, a, ξ)`.
    pub fn expected_cost(&self, s: usize, a: usize, theta: usize) -> f64 {
        (0..self.n_xi())
            .map(|xi| self.f(xi, theta) * self.stage_cost(s, a, xi))
            .sum()
    }

    /// State-transition row `P(s' | s, a, θ) = Σ_{ξ: g(s,a,ξ)=s'} f(ξ; θ)`.
    pub fn transition_prob(&self, s: usize, a: usize, theta: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states];
        for xi in 0..self.n_xi() {
            row[self.g(s, a, xi)] += self.f(xi, theta);
        }
        row
    }

    /// Largest stage cost over admissible `(s, a, ξ)` triples.
    pub fn c_max(&self) -> f64 {
        let mut m: f64 = 0.0;
        for s in 0..self.n_states {
            for &a in &self.admissible[s] {
                for xi in 0..self.n_xi() {
                    m = m.max(self.stage_cost(s, a, xi));
                }
            }
        }
        m
    }

    /// Upper bound `C_max / (1 - γ)` on any discounted value.
    pub fn v_max(&self) -> f64 {
        self.c_max() / (1.0 - self.discount)
    }

    /// True when every admissible action at `s` self-loops at zero cost for
    /// every outcome that is possible under some θ (episodes may stop here).
    pub fn is_absorbing_zero_cost(&self, s: usize) -> bool {
        self.admissible[s].iter().all(|&a| {
            (0..self.n_xi()).all(|xi| {
                let possible = (0..self.n_thetas()).any(|t| self.f(xi, t) > 0.0);
                !possible || (self.g(s, a, xi) == s && self.stage_cost(s, a, xi) == 0.0)
            })
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Two-state, two-θ chain used across the unit tests: action 0 moves
    /// 0 -> 1 deterministically, state 1 self-loops; ξ is informative.
    pub(crate) fn toy_spec() -> ModelSpec {
        ModelSpec::new(
            2,
            1,
            vec![vec![0], vec![0]],
            ParamSpace::new(vec![vec![0.0], vec![1.0]]),
            vec![vec![0.0], vec![1.0]],
            vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            vec![1, 1, 1, 1],
            vec![1.0, 2.0, 0.5, 0.25],
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn belief_clamps_tiny_negative_entries() {
        let b = Belief::new(vec![0.5, -5e-13, 0.5]).unwrap();
        assert_eq!(b.probs()[1], 0.0);
        assert!(Belief::new(vec![0.5, -1e-6, 0.5]).is_err());
    }

    #[test]
    fn belief_rejects_bad_mass() {
        assert!(Belief::new(vec![0.5, 0.6]).is_err());
        assert!(Belief::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn validate_accepts_toy_and_flags_broken_rows() {
        let spec = toy_spec();
        assert!(spec.validate().is_empty());

        let mut bad = spec.clone();
        bad.likelihood[0] = vec![0.7, 0.4];
        bad.cost[0] = -1.0;
        bad.transition[1] = 7;
        let violations = bad.validate();
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::LikelihoodNotNormalized { theta: 0, .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::NegativeCost { state: 0, action: 0, xi: 0, .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::TransitionOutOfRange { dest: 7, .. })));
    }

    #[test]
    fn validate_flags_bad_discount_and_empty_action_sets() {
        let mut spec = toy_spec();
        spec.discount = 1.0;
        spec.admissible[1].clear();
        let violations = spec.validate();
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::DiscountOutOfRange { .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::NoAdmissibleAction { state: 1 })));
    }

    #[test]
    fn expected_cost_matches_hand_sum() {
        let spec = toy_spec();
        // θ = 0: 0.7 * 1.0 + 0.3 * 2.0 = 1.3
        assert!((spec.expected_cost(0, 0, 0) - 1.3).abs() < 1e-15);
        // θ = 1: 0.2 * 1.0 + 0.8 * 2.0 = 1.8
        assert!((spec.expected_cost(0, 0, 1) - 1.8).abs() < 1e-15);
    }

    #[test]
    fn expected_cost_point_mass_picks_single_outcome() {
        let mut spec = toy_spec();
        spec.likelihood[0] = vec![1.0, 0.0];
        assert_eq!(spec.expected_cost(0, 0, 0), 1.0);
    }

    #[test]
    fn transition_prob_sums_outcomes_by_destination() {
        let spec = toy_spec();
        let row = spec.transition_prob(0, 0, 0);
        assert_eq!(row, vec![0.0, 1.0]);

        let mut split = spec.clone();
        split.transition = vec![0, 1, 1, 1];
        let row = split.transition_prob(0, 0, 1);
        assert!((row[0] - 0.2).abs() < 1e-15);
        assert!((row[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut spec = toy_spec();
        // Awkward binary fractions survive the shortest-round-trip encoder.
        spec.cost[2] = 0.1 + 0.2;
        spec.likelihood[1][0] = 1.0 / 3.0;
        spec.likelihood[1][1] = 1.0 - 1.0 / 3.0;
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec.cost, back.cost);
        assert_eq!(spec.likelihood, back.likelihood);
        assert_eq!(spec, back);
    }

    #[test]
    fn absorbing_detection_requires_zero_cost_self_loops() {
        let mut spec = toy_spec();
        assert!(!spec.is_absorbing_zero_cost(1));
        spec.cost[2] = 0.0;
        spec.cost[3] = 0.0;
        assert!(spec.is_absorbing_zero_cost(1));
        assert!(!spec.is_absorbing_zero_cost(0));
    }
}
