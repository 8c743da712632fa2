//! Parametric convex risk measures over finite parameter posteriors.
//!
//! Both supported measures have the parametric form
//! `ρ_μ(Z) = inf_φ E_μ[Ψ(Z, φ)]`:
//!
//! - expectation: `Ψ(z, φ) = z`, so `ρ_μ(Z) = E_μ[Z]`;
//! - CVaR at level α ∈ [0, 1): `Ψ(z, φ) = φ + (z - φ)⁺ / (1 - α)`, whose
//!   exact minimizer over φ is the left α-quantile of `Z` under μ.
//!
//! Evaluation is exact (sorting, no iterative optimization) and returns the
//! minimizing `φ*` together with a subgradient λ of `ρ_μ` at `Z`, normalized
//! so that `Σ_θ λ_θ = 1` with `0 ≤ λ_θ ≤ μ(θ) / (1 - α)`.  Ties are broken
//! deterministically by sorting atoms on `(z_θ, θ)`.

use crate::model::Belief;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("cvar level {0} outside [0, 1)")]
    BadAlpha(f64),
    #[error("risk input has {z} costs for {mu} posterior atoms")]
    DimensionMismatch { z: usize, mu: usize },
    #[error("risk input contains a non-finite cost")]
    NonFinite,
    #[error("risk input is empty")]
    Empty,
}

/// Which convex risk measure to apply at every stage of the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    Expectation,
    Cvar { alpha: f64 },
}

impl RiskSpec {
    pub fn validate(&self) -> Result<(), RiskError> {
        match *self {
            RiskSpec::Expectation => Ok(()),
            RiskSpec::Cvar { alpha } => {
                if (0.0..1.0).contains(&alpha) && alpha.is_finite() {
                    Ok(())
                } else {
                    Err(RiskError::BadAlpha(alpha))
                }
            }
        }
    }

    /// True when `ρ_μ` is affine in the cost vector, in which case one
    /// linearization of the risk is exact everywhere.
    pub fn is_affine(&self) -> bool {
        matches!(self, RiskSpec::Expectation)
    }

    /// Canonical method-name fragment (`exp`, `cvar(0.95)`).
    pub fn tag(&self) -> String {
        match *self {
            RiskSpec::Expectation => "exp".to_string(),
            RiskSpec::Cvar { alpha } => format!("cvar({alpha})"),
        }
    }
}

/// Exact risk evaluation: the value, the minimizing φ, and a subgradient.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEval {
    pub value: f64,
    /// Minimizer of the parametric form (0 for expectation, which has no φ).
    pub phi_star: f64,
    /// Subgradient of `ρ_μ` at `z`: `ρ_μ(z') ≥ ρ_μ(z) + λ · (z' - z)`.
    pub lambda: Vec<f64>,
}

fn check_inputs(z: &[f64], mu: &Belief) -> Result<(), RiskError> {
    if z.is_empty() {
        return Err(RiskError::Empty);
    }
    if z.len() != mu.len() {
        return Err(RiskError::DimensionMismatch { z: z.len(), mu: mu.len() });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(RiskError::NonFinite);
    }
    Ok(())
}

/// Evaluates `ρ_μ(z)` exactly.
///
/// For CVaR the atoms are sorted by `(z_θ, θ)`; `φ*` is the smallest atom
/// value whose cumulative mass reaches α (the left α-quantile), and the
/// subgradient assigns `μ(θ)/(1-α)` to atoms strictly above `φ*`, zero to
/// atoms strictly below, and splits the remaining mass across boundary atoms
/// in increasing θ order.
pub fn rho(risk: RiskSpec, z: &[f64], mu: &Belief) -> Result<RiskEval, RiskError> {
    risk.validate()?;
    check_inputs(z, mu)?;
    let p = mu.probs();
    match risk {
        RiskSpec::Expectation => {
            let value = z.iter().zip(p).map(|(zi, pi)| zi * pi).sum();
            Ok(RiskEval { value, phi_star: 0.0, lambda: p.to_vec() })
        }
        RiskSpec::Cvar { alpha } => {
            let scale = 1.0 / (1.0 - alpha);
            let mut order: Vec<usize> = (0..z.len()).collect();
            order.sort_by(|&i, &j| z[i].partial_cmp(&z[j]).unwrap().then(i.cmp(&j)));

            let mut cum = 0.0;
            let mut phi_star = z[order[0]];
            for &i in &order {
                cum += p[i];
                phi_star = z[i];
                if cum >= alpha {
                    break;
                }
            }

            let value = phi_star
                + scale * z.iter().zip(p).map(|(zi, pi)| pi * (zi - phi_star).max(0.0)).sum::<f64>();

            let mut lambda = vec![0.0; z.len()];
            let mut above = 0.0;
            for (i, l) in lambda.iter_mut().enumerate() {
                if z[i] > phi_star {
                    *l = p[i] * scale;
                    above += *l;
                }
            }
            // Boundary atoms absorb the rest of the unit mass in θ order.
            let mut remaining = (1.0 - above).max(0.0);
            for (i, l) in lambda.iter_mut().enumerate() {
                if remaining <= 0.0 {
                    break;
                }
                if z[i] == phi_star {
                    let take = remaining.min(p[i] * scale);
                    *l = take;
                    remaining -= take;
                }
            }
            Ok(RiskEval { value, phi_star, lambda })
        }
    }
}

/// Outcome of a finite-difference check of the reported subgradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientCheck {
    /// Largest |central difference − λ_θ| over the checked coordinates.
    pub max_deviation: f64,
    pub coords_checked: usize,
    /// Coordinates skipped because the risk is kinked (non-differentiable)
    /// within the finite-difference stencil.
    pub kinks_skipped: usize,
}

/// Central-difference validation of the subgradient returned by [`rho`].
///
/// CVaR is piecewise linear in `z`; a coordinate is checked only when moving
/// it by ±h cannot cross another atom's value or the quantile `φ*`, so every
/// checked coordinate is a point of differentiability and the central
/// difference must match λ exactly up to rounding.
pub fn rho_subgradient_check(
    risk: RiskSpec,
    z: &[f64],
    mu: &Belief,
    h: f64,
) -> Result<SubgradientCheck, RiskError> {
    let base = rho(risk, z, mu)?;
    let guard = 2.0 * h;
    let mut max_dev: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for i in 0..z.len() {
        let kinked = match risk {
            RiskSpec::Expectation => false,
            RiskSpec::Cvar { .. } => {
                (z[i] - base.phi_star).abs() <= guard
                    || z.iter()
                        .enumerate()
                        .any(|(j, &zj)| j != i && (zj - z[i]).abs() <= guard)
            }
        };
        if kinked {
            skipped += 1;
            continue;
        }
        let mut plus = z.to_vec();
        plus[i] += h;
        let mut minus = z.to_vec();
        minus[i] -= h;
        let fd = (rho(risk, &plus, mu)?.value - rho(risk, &minus, mu)?.value) / (2.0 * h);
        max_dev = max_dev.max((fd - base.lambda[i]).abs());
        checked += 1;
    }
    Ok(SubgradientCheck { max_deviation: max_dev, coords_checked: checked, kinks_skipped: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mu2(a: f64) -> Belief {
        Belief::new(vec![a, 1.0 - a]).unwrap()
    }

    #[test]
    fn expectation_is_the_weighted_mean() {
        let eval = rho(RiskSpec::Expectation, &[3.0, -1.0], &mu2(0.25)).unwrap();
        assert!((eval.value - (0.25 * 3.0 - 0.75)).abs() < 1e-15);
        assert_eq!(eval.lambda, vec![0.25, 0.75]);
        assert_eq!(eval.phi_star, 0.0);
    }

    #[test]
    fn cvar_half_of_two_point_distribution_is_the_worst_half_mean() {
        let eval = rho(RiskSpec::Cvar { alpha: 0.5 }, &[0.0, 10.0], &mu2(0.5)).unwrap();
        assert!((eval.value - 10.0).abs() < 1e-12);
        assert_eq!(eval.phi_star, 0.0);
        assert_eq!(eval.lambda, vec![0.0, 1.0]);
    }

    #[test]
    fn cvar_zero_reduces_to_expectation() {
        let mu = Belief::new(vec![0.3, 0.5, 0.2]).unwrap();
        let z = [4.0, -2.0, 7.5];
        let cvar0 = rho(RiskSpec::Cvar { alpha: 0.0 }, &z, &mu).unwrap();
        let mean = rho(RiskSpec::Expectation, &z, &mu).unwrap();
        assert!((cvar0.value - mean.value).abs() < 1e-12);
        for (a, b) in cvar0.lambda.iter().zip(&mean.lambda) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_point_mass_posterior_returns_that_cost() {
        let mu = Belief::corner(3, 1);
        let eval = rho(RiskSpec::Cvar { alpha: 0.9 }, &[5.0, 2.0, 8.0], &mu).unwrap();
        assert!((eval.value - 2.0).abs() < 1e-12);
        assert_eq!(eval.lambda, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn quantile_tie_break_uses_theta_order() {
        // Two atoms share the quantile value; the boundary mass is assigned
        // to the lower θ index first.
        let mu = Belief::new(vec![0.4, 0.4, 0.2]).unwrap();
        let eval = rho(RiskSpec::Cvar { alpha: 0.5 }, &[1.0, 1.0, 3.0], &mu).unwrap();
        assert_eq!(eval.phi_star, 1.0);
        let scale = 2.0;
        assert!((eval.lambda[2] - 0.2 * scale).abs() < 1e-12);
        // Remaining 0.6 of unit mass goes to θ=0 first (capped at 0.8).
        assert!((eval.lambda[0] - 0.6).abs() < 1e-12);
        assert!((eval.lambda[1] - 0.0).abs() < 1e-12);
        let total: f64 = eval.lambda.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subgradient_check_skips_the_all_equal_kink() {
        let mu = Belief::new(vec![0.5, 0.5]).unwrap();
        let check =
            rho_subgradient_check(RiskSpec::Cvar { alpha: 0.5 }, &[2.0, 2.0], &mu, 1e-5).unwrap();
        assert_eq!(check.coords_checked, 0);
        assert_eq!(check.kinks_skipped, 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mu = mu2(0.5);
        assert!(rho(RiskSpec::Cvar { alpha: 1.0 }, &[0.0, 1.0], &mu).is_err());
        assert!(rho(RiskSpec::Expectation, &[0.0], &mu).is_err());
        assert!(rho(RiskSpec::Expectation, &[f64::NAN, 1.0], &mu).is_err());
    }

    #[test]
    fn risk_spec_json_round_trip() {
        let exp: RiskSpec = serde_json::from_str(r#"{"kind":"expectation"}"#).unwrap();
        assert_eq!(exp, RiskSpec::Expectation);
        let cvar: RiskSpec = serde_json::from_str(r#"{"kind":"cvar","alpha":0.95}"#).unwrap();
        assert_eq!(cvar, RiskSpec::Cvar { alpha: 0.95 });
        let json = serde_json::to_string(&cvar).unwrap();
        assert_eq!(json, r#"{"kind":"cvar","alpha":0.95}"#);
    }

    prop_compose! {
        fn arb_mu_z(n: usize)
            (raw in prop::collection::vec(0.05f64..1.0, n),
             z in prop::collection::vec(-10.0f64..10.0, n))
            -> (Belief, Vec<f64>)
        {
            let total: f64 = raw.iter().sum();
            let mu = Belief::new(raw.iter().map(|w| w / total).collect()).unwrap();
            (mu, z)
        }
    }

    fn arb_risk() -> impl Strategy<Value = RiskSpec> {
        prop_oneof![
            Just(RiskSpec::Expectation),
            (0.0f64..0.99).prop_map(|alpha| RiskSpec::Cvar { alpha }),
        ]
    }

    proptest! {
        #[test]
        fn monotone_in_costs((mu, z) in arb_mu_z(4), risk in arb_risk(),
                             bump in prop::collection::vec(0.0f64..5.0, 4)) {
            let lo = rho(risk, &z, &mu).unwrap().value;
            let hi_z: Vec<f64> = z.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let hi = rho(risk, &hi_z, &mu).unwrap().value;
            prop_assert!(hi >= lo - 1e-9);
        }

        #[test]
        fn translation_invariant((mu, z) in arb_mu_z(4), risk in arb_risk(),
                                 c in -5.0f64..5.0) {
            let base = rho(risk, &z, &mu).unwrap().value;
            let shifted_z: Vec<f64> = z.iter().map(|v| v + c).collect();
            let shifted = rho(risk, &shifted_z, &mu).unwrap().value;
            prop_assert!((shifted - (base + c)).abs() < 1e-9);
        }

        #[test]
        fn convex_in_costs((mu, z1) in arb_mu_z(4), z2 in prop::collection::vec(-10.0f64..10.0, 4),
                           risk in arb_risk(), t in 0.0f64..1.0) {
            let mix: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let lhs = rho(risk, &mix, &mu).unwrap().value;
            let rhs = t * rho(risk, &z1, &mu).unwrap().value
                + (1.0 - t) * rho(risk, &z2, &mu).unwrap().value;
            prop_assert!(lhs <= rhs + 1e-9);
        }

        #[test]
        fn subgradient_inequality((mu, z) in arb_mu_z(4),
                                  z2 in prop::collection::vec(-10.0f64..10.0, 4),
                                  risk in arb_risk()) {
            let at = rho(risk, &z, &mu).unwrap();
            let there = rho(risk, &z2, &mu).unwrap().value;
            let linear: f64 = at.lambda.iter().zip(z2.iter().zip(&z))
                .map(|(l, (b, a))| l * (b - a)).sum();
            prop_assert!(there >= at.value + linear - 1e-9);
        }

        #[test]
        fn cvar_dominates_expectation((mu, z) in arb_mu_z(4), alpha in 0.0f64..0.99) {
            let cvar = rho(RiskSpec::Cvar { alpha }, &z, &mu).unwrap().value;
            let mean = rho(RiskSpec::Expectation, &z, &mu).unwrap().value;
            prop_assert!(cvar >= mean - 1e-9);
        }

        #[test]
        fn lambda_is_a_valid_dual_point((mu, z) in arb_mu_z(5), risk in arb_risk()) {
            let eval = rho(risk, &z, &mu).unwrap();
            let total: f64 = eval.lambda.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            if let RiskSpec::Cvar { alpha } = risk {
                let scale = 1.0 / (1.0 - alpha);
                for (l, p) in eval.lambda.iter().zip(mu.probs()) {
                    prop_assert!(*l >= -1e-12 && *l <= p * scale + 1e-9);
                }
            }
        }

        #[test]
        fn finite_differences_match_lambda((mu, z) in arb_mu_z(4), risk in arb_risk()) {
            let check = rho_subgradient_check(risk, &z, &mu, 1e-6).unwrap();
            prop_assert!(check.max_deviation < 1e-7,
                         "fd deviation {}", check.max_deviation);
        }
    }
}
