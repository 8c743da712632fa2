//! Synthetic problem generators for randomized cross-checks.
//!
//! Used by the randomized test suites and the CLI's `oracle-check`
//! subcommand; nothing in the solver path depends on this module.

use crate::lp::LinearProgram;
use crate::model::{Belief, ModelSpec, ParamSpace};
use rand::Rng;

/// Random fully-admissible model with strictly positive likelihood mass on
/// most outcomes (about a quarter of the rows get one impossible outcome, to
/// exercise the zero-probability paths).  Stage costs are normalized to
/// `[0, 1)`, so values live on the scale `1/(1−γ)`.
pub fn random_small_model<R: Rng>(
    rng: &mut R,
    max_states: usize,
    max_thetas: usize,
    max_xi: usize,
    discount: f64,
) -> ModelSpec {
    let n_states = rng.gen_range(2..=max_states.max(2));
    let n_thetas = rng.gen_range(2..=max_thetas.max(2));
    let n_xi = rng.gen_range(2..=max_xi.max(2));
    let n_actions = rng.gen_range(1..=3usize);

    let likelihood: Vec<Vec<f64>> = (0..n_thetas)
        .map(|_| {
            let mut row: Vec<f64> = (0..n_xi).map(|_| rng.gen_range(0.1..1.0)).collect();
            if n_xi > 1 && rng.gen_bool(0.25) {
                let dead = rng.gen_range(0..n_xi);
                row[dead] = 0.0;
            }
            let total: f64 = row.iter().sum();
            row.iter().map(|w| w / total).collect()
        })
        .collect();

    let table = n_states * n_actions * n_xi;
    let transition: Vec<usize> = (0..table).map(|_| rng.gen_range(0..n_states)).collect();
    let cost: Vec<f64> = (0..table).map(|_| rng.gen_range(0.0..1.0)).collect();
    let thetas: Vec<Vec<f64>> = (0..n_thetas).map(|t| vec![t as f64]).collect();
    let xi_support: Vec<Vec<f64>> = (0..n_xi).map(|x| vec![x as f64]).collect();
    let admissible: Vec<Vec<usize>> = (0..n_states).map(|_| (0..n_actions).collect()).collect();

    ModelSpec::new(
        n_states,
        n_actions,
        admissible,
        ParamSpace { thetas },
        xi_support,
        likelihood,
        transition,
        cost,
        discount,
    )
    .expect("generated tables are dimensionally consistent")
}

/// Random interior belief over `n` candidates.
pub fn random_belief<R: Rng>(rng: &mut R, n: usize) -> Belief {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Belief::new(raw.iter().map(|w| w / total).collect())
        .expect("normalized positive weights form a belief")
}

/// Random bounded-feasible LP: x ≥ 0, rows built around a known interior
/// point so feasibility is guaranteed; c ≥ 0 keeps the program bounded.
pub fn random_feasible_lp<R: Rng>(rng: &mut R, n: usize, rows: usize) -> LinearProgram {
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
    let mut a_ineq = Vec::new();
    let mut b_ineq = Vec::new();
    for _ in 0..rows {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax: f64 = row.iter().zip(&x0).map(|(a, x)| a * x).sum();
        b_ineq.push(ax + rng.gen_range(0.0..1.5));
        a_ineq.push(row);
    }
    LinearProgram {
        objective: (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
        a_ineq,
        b_ineq,
        a_eq: Vec::new(),
        d_eq: Vec::new(),
        lower: vec![0.0; n],
        upper: vec![f64::INFINITY; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_models_validate_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let model = random_small_model(&mut rng, 4, 3, 3, 0.9);
            assert!(model.validate().is_empty());
            let mu = random_belief(&mut rng, model.n_thetas());
            assert!((mu.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
