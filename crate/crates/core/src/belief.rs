//! Posterior beliefs over the unknown parameter and their projection onto a
//! finite grid.
//!
//! A [`BeliefSet`] is an ordered collection of beliefs `M̂ = {μ₁, …, μ_I}`
//! used as interpolation nodes.  The corner (point-mass) beliefs always come
//! first, so every belief in the simplex lies in the convex hull of the set
//! and interpolation weights always exist.
//!
//! The Bayes update after observing outcome `ξ` is
//!
//! ```text
//! μ'(θ) = μ(θ) f(ξ; θ) / Σ_ϑ μ(ϑ) f(ξ; ϑ),
//! ```
//!
//! and a posterior that leaves the grid is replaced by a convex combination
//! of grid members with matching mean, computed by the linear program
//!
//! ```text
//! min Σ_i w_i ‖μ_i − μ‖²   s.t.   Σ_i w_i μ_i = μ,  Σ_i w_i = 1,  w ≥ 0.
//! ```
//!
//! The quadratic-distance objective is linear in `w`, so this is an LP; a
//! basic optimal solution has at most `|Θ| + 1` nonzero weights, and when the
//! target is itself a member the unique optimum is the unit weight on it.

use crate::lp::{solve_lp, LinearProgram, LpError, LpStatus};
use crate::model::{Belief, ModelSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Beliefs closer than this (Euclidean) are treated as duplicates.
pub const DEDUP_TOL: f64 = 1e-9;
/// Targets this close to a member short-circuit to a unit weight.
const MEMBER_SNAP_TOL: f64 = 1e-12;
/// Predictive probabilities at or below this are treated as impossible.
const PREDICTIVE_FLOOR: f64 = f64::MIN_POSITIVE;

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("observation {xi} has zero predictive probability under the belief")]
    ImpossibleObservation { xi: usize },
    #[error("belief has {got} coordinates, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("target belief lies outside the convex hull of the set")]
    OutsideHull,
    #[error("interpolation weights failed validation: {0}")]
    WeightsInvalid(String),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Sparse convex-combination weights over the members of a [`BeliefSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationWeights {
    /// `(member index, weight)` pairs, ascending by index, weights summing
    /// to 1.
    pub support: Vec<(usize, f64)>,
}

impl InterpolationWeights {
    pub fn unit(member: usize) -> Self {
        InterpolationWeights { support: vec![(member, 1.0)] }
    }

    /// `Σ_i w_i v[i]` for a value table indexed like the belief set.
    pub fn combine(&self, values: &[f64]) -> f64 {
        self.support.iter().map(|&(i, w)| w * values[i]).sum()
    }

    /// The belief this weight vector reconstructs.
    pub fn reconstruct(&self, set: &BeliefSet) -> Belief {
        let mut acc = vec![0.0; set.n_thetas()];
        for &(i, w) in &self.support {
            for (a, p) in acc.iter_mut().zip(set.member(i).probs()) {
                *a += w * p;
            }
        }
        Belief::new(acc).expect("convex combination of beliefs is a belief")
    }
}

/// Ordered grid of beliefs; the `n_thetas` corner beliefs always occupy the
/// first `n_thetas` slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeliefSet {
    members: Vec<Belief>,
    n_thetas: usize,
    version: u64,
}

impl BeliefSet {
    /// The corner beliefs alone.
    pub fn corners(n_thetas: usize) -> Self {
        assert!(n_thetas > 0, "belief set needs at least one parameter");
        let members = (0..n_thetas).map(|i| Belief::corner(n_thetas, i)).collect();
        BeliefSet { members, n_thetas, version: 0 }
    }

    /// Corners followed by `extra` beliefs (duplicates dropped).
    pub fn corners_and(n_thetas: usize, extra: &[Belief]) -> Self {
        let mut set = Self::corners(n_thetas);
        for mu in extra {
            set.push_dedup(mu.clone());
        }
        set
    }

    /// Adds a belief unless it duplicates an existing member; returns whether
    /// it was added.
    pub fn push_dedup(&mut self, mu: Belief) -> bool {
        assert_eq!(mu.probs().len(), self.n_thetas, "belief dimension mismatch");
        if self.distance(&mu) <= DEDUP_TOL {
            return false;
        }
        self.members.push(mu);
        self.version += 1;
        true
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_thetas(&self) -> usize {
        self.n_thetas
    }

    /// Bumped whenever a member is added; lets caches detect staleness.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn member(&self, i: usize) -> &Belief {
        &self.members[i]
    }

    pub fn members(&self) -> &[Belief] {
        &self.members
    }

    /// Euclidean distance from `mu` to the nearest member.
    pub fn distance(&self, mu: &Belief) -> f64 {
        self.members
            .iter()
            .map(|m| m.euclidean(mu))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance to the nearest member or element of `extra`.
    pub fn distance_with_extra(&self, extra: &[Belief], mu: &Belief) -> f64 {
        let d = self.distance(mu);
        extra
            .iter()
            .map(|m| m.euclidean(mu))
            .fold(d, f64::min)
    }

    /// Index of the member within `MEMBER_SNAP_TOL` of `mu`, if any.
    fn snap_to_member(&self, mu: &Belief) -> Option<usize> {
        self.members
            .iter()
            .position(|m| m.euclidean(mu) <= MEMBER_SNAP_TOL)
    }
}

/// Posterior after observing outcome `xi` under belief `mu`.
pub fn bayes_update(model: &ModelSpec, mu: &Belief, xi: usize) -> Result<Belief, BeliefError> {
    let n = model.n_thetas();
    if mu.probs().len() != n {
        return Err(BeliefError::DimensionMismatch { got: mu.probs().len(), expected: n });
    }
    let mut unnorm = Vec::with_capacity(n);
    let mut mass = 0.0;
    for (theta, &p) in mu.probs().iter().enumerate() {
        let u = p * model.f(xi, theta);
        unnorm.push(u);
        mass += u;
    }
    if mass <= PREDICTIVE_FLOOR {
        return Err(BeliefError::ImpossibleObservation { xi });
    }
    for u in &mut unnorm {
        *u /= mass;
    }
    Ok(Belief::new(unnorm).expect("normalized posterior is a belief"))
}

/// Predictive probability of outcome `xi` under belief `mu`:
/// `Σ_θ μ(θ) f(ξ; θ)`.
pub fn predictive(model: &ModelSpec, mu: &Belief, xi: usize) -> f64 {
    mu.probs()
        .iter()
        .enumerate()
        .map(|(theta, &p)| p * model.f(xi, theta))
        .sum()
}

/// One-step posteriors indexed by outcome; `None` where the predictive
/// probability vanishes.
pub fn one_step_posteriors(model: &ModelSpec, mu: &Belief) -> Vec<Option<Belief>> {
    (0..model.n_xi())
        .map(|xi| bayes_update(model, mu, xi).ok())
        .collect()
}

/// Convex-combination weights over `set` reproducing `target`, solved as a
/// linear program (see the module docs).  Corner members guarantee
/// feasibility for any belief.
pub fn interpolation_weights(
    set: &BeliefSet,
    target: &Belief,
) -> Result<InterpolationWeights, BeliefError> {
    let n_thetas = set.n_thetas();
    if target.probs().len() != n_thetas {
        return Err(BeliefError::DimensionMismatch {
            got: target.probs().len(),
            expected: n_thetas,
        });
    }
    if let Some(i) = set.snap_to_member(target) {
        return Ok(InterpolationWeights::unit(i));
    }

    let k = set.len();
    let mut a_eq = Vec::with_capacity(n_thetas + 1);
    let mut d_eq = Vec::with_capacity(n_thetas + 1);
    for theta in 0..n_thetas {
        a_eq.push(set.members().iter().map(|m| m.probs()[theta]).collect());
        d_eq.push(target.probs()[theta]);
    }
    a_eq.push(vec![1.0; k]);
    d_eq.push(1.0);

    let lp = LinearProgram {
        objective: set
            .members()
            .iter()
            .map(|m| {
                let d = m.euclidean(target);
                d * d
            })
            .collect(),
        a_ineq: Vec::new(),
        b_ineq: Vec::new(),
        a_eq,
        d_eq,
        lower: vec![0.0; k],
        upper: vec![1.0; k],
    };
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(BeliefError::OutsideHull),
        LpStatus::Unbounded => {
            return Err(BeliefError::WeightsInvalid("bounded LP reported unbounded".into()))
        }
    }

    let raw_sum: f64 = sol.x.iter().sum();
    if (raw_sum - 1.0).abs() > 1e-8 {
        return Err(BeliefError::WeightsInvalid(format!(
            "weights sum to {raw_sum}, expected 1"
        )));
    }
    let mut support: Vec<(usize, f64)> = sol
        .x
        .iter()
        .enumerate()
        .filter(|&(_, &w)| w > 1e-12)
        .map(|(i, &w)| (i, w))
        .collect();
    let kept: f64 = support.iter().map(|&(_, w)| w).sum();
    for (_, w) in &mut support {
        *w /= kept;
    }
    let weights = InterpolationWeights { support };

    let rebuilt = weights.reconstruct(set);
    for (theta, (r, t)) in rebuilt.probs().iter().zip(target.probs()).enumerate() {
        if (r - t).abs() > 1e-7 {
            return Err(BeliefError::WeightsInvalid(format!(
                "coordinate {theta} reconstructs to {r}, target {t}"
            )));
        }
    }
    Ok(weights)
}

/// Per-outcome interpolation weights of the one-step posteriors of `mu`.
///
/// Outcomes with zero predictive probability fall back to the weights of
/// `mu` itself — the belief is left unchanged — so every outcome has usable
/// weights and per-parameter transition rows still sum to one.
pub fn approx_transition(
    model: &ModelSpec,
    set: &BeliefSet,
    mu: &Belief,
) -> Result<Vec<InterpolationWeights>, BeliefError> {
    let self_weights = interpolation_weights(set, mu)?;
    let mut out = Vec::with_capacity(model.n_xi());
    for xi in 0..model.n_xi() {
        match bayes_update(model, mu, xi) {
            Ok(post) => out.push(interpolation_weights(set, &post)?),
            Err(BeliefError::ImpossibleObservation { .. }) => out.push(self_weights.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// [`approx_transition`] evaluated at every member of the set.
///
/// The one-step posterior of a member depends only on the member and the
/// outcome — not on the state or action — so this table is the whole
/// belief-side transition structure a grid solver needs.
pub fn grid_transition(
    model: &ModelSpec,
    set: &BeliefSet,
) -> Result<Vec<Vec<InterpolationWeights>>, BeliefError> {
    (0..set.len())
        .map(|i| {
            let mut per_xi = Vec::with_capacity(model.n_xi());
            let self_weights = InterpolationWeights::unit(i);
            for xi in 0..model.n_xi() {
                match bayes_update(model, set.member(i), xi) {
                    Ok(post) => per_xi.push(interpolation_weights(set, &post)?),
                    Err(BeliefError::ImpossibleObservation { .. }) => {
                        per_xi.push(self_weights.clone())
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(per_xi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_spec;
    use proptest::prelude::*;

    fn belief(v: &[f64]) -> Belief {
        Belief::new(v.to_vec()).unwrap()
    }

    #[test]
    fn corners_come_first() {
        let set = BeliefSet::corners_and(3, &[belief(&[0.2, 0.3, 0.5])]);
        assert_eq!(set.len(), 4);
        for i in 0..3 {
            assert_eq!(set.member(i).corner_index(1e-12), Some(i));
        }
        assert_eq!(set.member(3).probs(), &[0.2, 0.3, 0.5]);
    }

    #[test]
    fn dedup_rejects_near_duplicates() {
        let mut set = BeliefSet::corners(2);
        let v0 = set.version();
        assert!(!set.push_dedup(belief(&[1.0, 0.0])));
        assert_eq!(set.version(), v0);
        assert!(set.push_dedup(belief(&[0.5, 0.5])));
        assert!(!set.push_dedup(belief(&[0.5 + 1e-12, 0.5 - 1e-12])));
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn bayes_update_matches_hand_calculation() {
        let model = toy_spec();
        // f(ξ₀; θ) = (0.7, 0.2); uniform prior → posterior (7/9, 2/9).
        let post = bayes_update(&model, &Belief::uniform(2), 0).unwrap();
        assert!((post.probs()[0] - 7.0 / 9.0).abs() < 1e-15);
        assert!((post.probs()[1] - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn impossible_observation_is_an_error() {
        let mut model = toy_spec();
        model.likelihood = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let err = bayes_update(&model, &Belief::uniform(2), 0).unwrap_err();
        assert!(matches!(err, BeliefError::ImpossibleObservation { xi: 0 }));
    }

    #[test]
    fn one_step_posteriors_match_single_updates() {
        let model = toy_spec();
        let mu = belief(&[0.3, 0.7]);
        let all = one_step_posteriors(&model, &mu);
        assert_eq!(all.len(), model.n_xi());
        for (xi, post) in all.iter().enumerate() {
            let direct = bayes_update(&model, &mu, xi).unwrap();
            assert_eq!(post.as_ref().unwrap().probs(), direct.probs());
        }
    }

    #[test]
    fn predictive_probabilities_sum_to_one() {
        let model = toy_spec();
        let mu = belief(&[0.25, 0.75]);
        let total: f64 = (0..model.n_xi()).map(|xi| predictive(&model, &mu, xi)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn member_target_gets_unit_weight() {
        let set = BeliefSet::corners_and(3, &[belief(&[0.2, 0.3, 0.5])]);
        let w = interpolation_weights(&set, set.member(3)).unwrap();
        assert_eq!(w.support, vec![(3, 1.0)]);
        let w0 = interpolation_weights(&set, &Belief::corner(3, 1)).unwrap();
        assert_eq!(w0.support, vec![(1, 1.0)]);
    }

    #[test]
    fn interior_target_reconstructs() {
        let set = BeliefSet::corners_and(3, &[belief(&[0.6, 0.2, 0.2])]);
        let target = belief(&[0.3, 0.4, 0.3]);
        let w = interpolation_weights(&set, &target).unwrap();
        let sum: f64 = w.support.iter().map(|&(_, w)| w).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(w.support.len() <= 4, "basic solution support bound");
        let rebuilt = w.reconstruct(&set);
        for (r, t) in rebuilt.probs().iter().zip(target.probs()) {
            assert!((r - t).abs() < 1e-7);
        }
    }

    #[test]
    fn distance_with_extra_sees_both_pools() {
        let set = BeliefSet::corners(2);
        let mu = belief(&[0.5, 0.5]);
        let d_plain = set.distance(&mu);
        assert!(d_plain > 0.1);
        let d = set.distance_with_extra(&[belief(&[0.5, 0.5])], &mu);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn transition_falls_back_to_self_on_impossible_outcome() {
        let mut model = toy_spec();
        // ξ₀ impossible under every parameter: all mass on ξ₁.
        model.likelihood = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let set = BeliefSet::corners_and(2, &[belief(&[0.4, 0.6])]);
        let table = grid_transition(&model, &set).unwrap();
        for (i, per_xi) in table.iter().enumerate() {
            assert_eq!(per_xi[0].support, vec![(i, 1.0)], "member {i} falls back to itself");
        }
        let w = approx_transition(&model, &set, &belief(&[0.4, 0.6])).unwrap();
        assert_eq!(w[0].support, vec![(2, 1.0)]);
    }

    #[test]
    fn grid_transition_rows_match_pointwise_updates() {
        let model = toy_spec();
        let set = BeliefSet::corners_and(2, &[belief(&[0.35, 0.65])]);
        let table = grid_transition(&model, &set).unwrap();
        for i in 0..set.len() {
            for xi in 0..model.n_xi() {
                let post = bayes_update(&model, set.member(i), xi).unwrap();
                let rebuilt = table[i][xi].reconstruct(&set);
                for (r, t) in rebuilt.probs().iter().zip(post.probs()) {
                    assert!((r - t).abs() < 1e-7);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_reproduce_random_targets(
            raw in proptest::collection::vec(0.05f64..1.0, 3),
            extra in proptest::collection::vec(0.05f64..1.0, 3),
        ) {
            let norm: f64 = raw.iter().sum();
            let target = belief(&raw.iter().map(|v| v / norm).collect::<Vec<_>>());
            let enorm: f64 = extra.iter().sum();
            let member = belief(&extra.iter().map(|v| v / enorm).collect::<Vec<_>>());
            let set = BeliefSet::corners_and(3, &[member]);

            let w = interpolation_weights(&set, &target).unwrap();
            let sum: f64 = w.support.iter().map(|&(_, w)| w).sum();
            prop_assert!((sum - 1.0).abs() < 1e-8);
            prop_assert!(w.support.iter().all(|&(_, w)| w >= 0.0));
            prop_assert!(w.support.len() <= 4);
            let rebuilt = w.reconstruct(&set);
            for (r, t) in rebuilt.probs().iter().zip(target.probs()) {
                prop_assert!((r - t).abs() < 1e-7);
            }
        }

        #[test]
        fn bayes_updates_commute(
            raw in proptest::collection::vec(0.05f64..1.0, 2),
            xi1 in 0usize..2,
            xi2 in 0usize..2,
        ) {
            let model = toy_spec();
            let norm: f64 = raw.iter().sum();
            let mu = belief(&raw.iter().map(|v| v / norm).collect::<Vec<_>>());
            let a = bayes_update(&model, &bayes_update(&model, &mu, xi1).unwrap(), xi2).unwrap();
            let b = bayes_update(&model, &bayes_update(&model, &mu, xi2).unwrap(), xi1).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
