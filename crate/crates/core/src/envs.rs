//! Builders for the two benchmark environments, dataset sampling from the
//! true parameters, and prior construction from data.
//!
//! Both environments have continuous randomness in their textbook form
//! (exponential traffic times, Poisson demand); the builders discretize at
//! construction time so the one-step posterior branching is finite:
//!
//! * traffic times are split into `m` equal-probability bins under a
//!   per-road-type reference rate (the slowest candidate, so that slow
//!   regimes stay both distinguishable and expensive after discretization),
//!   each bin represented by its conditional mean; bin probabilities are
//!   recomputed per candidate rate, which keeps observations informative
//!   about the rate;
//! * Poisson demand is truncated at a cap with the tail mass folded into the
//!   cap, so each per-θ distribution still normalizes.
//!
//! An outcome ξ is the joint vector of all stochastic components (mixed-radix
//! encoded, component 0 fastest-varying), and the parameter space Θ is the
//! product of the per-block candidate grids, so likelihoods factorize across
//! independent blocks.

use crate::model::{Belief, ModelSpec, ParamSpace};
use crate::util::sample_discrete;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Hard cap on the number of states a builder will accept.
pub const MAX_STATES: usize = 200_000;
/// Hard cap on flat `states × actions × outcomes` table entries.
pub const MAX_TABLE_ENTRIES: usize = 20_000_000;
/// Hard cap on parameter atoms.
pub const MAX_THETAS: usize = 20_000;

const GRID_MEMBER_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("goal is unreachable from the start cell")]
    UnreachableGoal,
    #[error("state space has {states} states, exceeding the budget of {budget}; shrink K or S_i")]
    StateBudget { states: usize, budget: usize },
    #[error(
        "model tables need {entries} entries, exceeding the budget of {budget}; \
         shrink the state space, action space, or outcome support"
    )]
    TableBudget { entries: usize, budget: usize },
    #[error("parameter space has {atoms} atoms, exceeding the budget of {budget}; shrink the candidate grids")]
    ThetaBudget { atoms: usize, budget: usize },
    #[error("dataset has zero likelihood under every candidate parameter")]
    ZeroPosteriorMass,
    #[error("observation {0} malformed: {1}")]
    BadObservation(usize, String),
    #[error("built model failed validation: {0}")]
    Model(String),
}

/// A built environment: the discretized model plus the bookkeeping needed to
/// simulate the true system and to read/write observation datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Env {
    pub model: ModelSpec,
    pub start_state: usize,
    /// Index into `model.params` of the true parameter combination.
    pub true_theta: usize,
    /// One name per stochastic component of ξ.
    pub component_names: Vec<String>,
    /// Mixed-radix sizes per component (product = `model.n_xi()`).
    pub component_sizes: Vec<usize>,
}

impl Env {
    /// Splits an outcome index into per-component digits (component 0
    /// fastest-varying).
    pub fn decode_observation(&self, xi: usize) -> Vec<usize> {
        let mut digits = Vec::with_capacity(self.component_sizes.len());
        let mut rest = xi;
        for &size in &self.component_sizes {
            digits.push(rest % size);
            rest /= size;
        }
        digits
    }

    /// Inverse of [`Env::decode_observation`]; `None` when a digit is out of
    /// range or the arity is wrong.
    pub fn encode_observation(&self, digits: &[usize]) -> Option<usize> {
        if digits.len() != self.component_sizes.len() {
            return None;
        }
        let mut xi = 0;
        let mut stride = 1;
        for (&d, &size) in digits.iter().zip(&self.component_sizes) {
            if d >= size {
                return None;
            }
            xi += d * stride;
            stride *= size;
        }
        Some(xi)
    }

    /// Serializes observations as CSV, one row per observation, one column
    /// per component.
    pub fn dataset_to_csv(&self, observations: &[usize]) -> String {
        let mut out = self.component_names.join(",");
        out.push('\n');
        for &xi in observations {
            let digits = self.decode_observation(xi);
            let row: Vec<String> = digits.iter().map(|d| d.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses a dataset produced by [`Env::dataset_to_csv`] (header required).
    pub fn dataset_from_csv(&self, text: &str) -> Result<Vec<usize>, EnvError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().skip(1).enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let digits: Vec<usize> = line
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<usize>()
                        .map_err(|e| EnvError::BadObservation(i, e.to_string()))
                })
                .collect::<Result<_, _>>()?;
            let xi = self
                .encode_observation(&digits)
                .ok_or_else(|| EnvError::BadObservation(i, "component out of range".into()))?;
            out.push(xi);
        }
        Ok(out)
    }
}

/// Equal-probability discretization of an exponential distribution.
#[derive(Debug, Clone)]
pub struct ExpBins {
    /// `m + 1` bounds, `bounds[0] = 0`, `bounds[m] = ∞`.
    pub bounds: Vec<f64>,
    /// Conditional-mean representative per bin under the reference rate.
    pub reps: Vec<f64>,
}

/// Splits `Exp(rate)` into `m` equal-probability bins with conditional-mean
/// representatives (the last, unbounded bin gets `b_{m-1} + 1/rate` by the
/// memoryless property).
pub fn exponential_bins(rate: f64, m: usize) -> ExpBins {
    let mut bounds = Vec::with_capacity(m + 1);
    bounds.push(0.0);
    for k in 1..m {
        bounds.push(-(1.0 - k as f64 / m as f64).ln() / rate);
    }
    bounds.push(f64::INFINITY);
    let reps = (0..m)
        .map(|k| {
            let a = bounds[k];
            let b = bounds[k + 1];
            if b.is_infinite() {
                a + 1.0 / rate
            } else {
                let ea = (-rate * a).exp();
                let eb = (-rate * b).exp();
                ((a + 1.0 / rate) * ea - (b + 1.0 / rate) * eb) / (ea - eb)
            }
        })
        .collect();
    ExpBins { bounds, reps }
}

/// Bin probabilities of `Exp(rate)` against fixed bounds (telescoping, so
/// they sum to one for every rate).
pub fn exponential_bin_probs(rate: f64, bounds: &[f64]) -> Vec<f64> {
    (0..bounds.len() - 1)
        .map(|k| {
            let hi = if bounds[k + 1].is_infinite() { 0.0 } else { (-rate * bounds[k + 1]).exp() };
            (-rate * bounds[k]).exp() - hi
        })
        .collect()
}

/// Poisson pmf truncated at `cap` with the tail mass folded into `cap`.
pub fn truncated_poisson(rate: f64, cap: usize) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(cap + 1);
    let mut p = (-rate).exp();
    let mut below = 0.0;
    for k in 0..cap {
        pmf.push(p);
        below += p;
        p *= rate / (k + 1) as f64;
    }
    pmf.push((1.0 - below).max(0.0));
    pmf
}

fn in_grid(value: f64, grid: &[f64]) -> Option<usize> {
    grid.iter().position(|&g| (g - value).abs() <= GRID_MEMBER_TOL)
}

// ---------------------------------------------------------------------------
// Path planning
// ---------------------------------------------------------------------------

/// Road-type labels used in docs, component names, and error messages.
pub const ROAD_TYPE_NAMES: [&str; 4] = ["highway", "main_road", "street", "lane"];

/// Grid-world path planning with four road types, exponential traffic times,
/// and per-type accident probabilities.
///
/// A candidate grid of length one means the block is known (it contributes
/// no parameter atom; a known rate also folds its traversal cost to the
/// deterministic mean `1/rate`).  An accident-bit component exists for every
/// type whose candidate accident probabilities are not identically zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathPlanningConfig {
    pub width: usize,
    pub height: usize,
    /// `height` rows of `width` road types (0–3); −1 marks off-road cells.
    pub map: Vec<Vec<i8>>,
    /// `[x, y]` of the start cell.
    pub start: [usize; 2],
    /// `[x, y]` of the absorbing goal cell.
    pub goal: [usize; 2],
    /// True traffic rate per road type.
    pub true_rates: [f64; 4],
    /// True accident probability per road type.
    pub true_accident: [f64; 4],
    /// Candidate traffic rates per road type (singleton = known).
    pub rate_grids: [Vec<f64>; 4],
    /// Candidate accident probabilities per road type (singleton = known).
    pub accident_grids: [Vec<f64>; 4],
    /// Constant cost of an accident (the agent also makes no transition).
    pub accident_delay: f64,
    /// Traffic-time bins per unknown-rate type.
    pub bins: usize,
    pub discount: f64,
}

#[derive(Debug, Clone, Copy)]
enum Component {
    /// Traffic-time bin of a road type with an unknown rate.
    TimeBin { road_type: usize },
    /// Accident indicator of a road type with possible accidents.
    AccBit { road_type: usize },
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Rate { road_type: usize },
    Accident { road_type: usize },
}

fn validate_pathplanning(cfg: &PathPlanningConfig) -> Result<(), EnvError> {
    let fail = |msg: String| Err(EnvError::InvalidConfig(msg));
    if cfg.width == 0 || cfg.height == 0 {
        return fail("grid dimensions must be positive".into());
    }
    if cfg.map.len() != cfg.height || cfg.map.iter().any(|row| row.len() != cfg.width) {
        return fail(format!("map must be {} rows of {} entries", cfg.height, cfg.width));
    }
    if cfg.map.iter().flatten().any(|&t| !(-1..=3).contains(&t)) {
        return fail("map entries must be road types 0-3 or -1".into());
    }
    if cfg.bins < 2 {
        return fail(format!("need at least 2 traffic-time bins, got {}", cfg.bins));
    }
    if !(0.0..1.0).contains(&cfg.discount) {
        return fail(format!("discount {} outside [0, 1)", cfg.discount));
    }
    if !(cfg.accident_delay.is_finite() && cfg.accident_delay >= 0.0) {
        return fail(format!("accident delay {} must be nonnegative", cfg.accident_delay));
    }
    for t in 0..4 {
        if cfg.rate_grids[t].is_empty() || cfg.accident_grids[t].is_empty() {
            return fail(format!("candidate grids for {} must be non-empty", ROAD_TYPE_NAMES[t]));
        }
        if cfg.rate_grids[t].iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return fail(format!("candidate rates for {} must be positive", ROAD_TYPE_NAMES[t]));
        }
        if cfg.accident_grids[t].iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return fail(format!(
                "candidate accident probabilities for {} must lie in [0, 1]",
                ROAD_TYPE_NAMES[t]
            ));
        }
        if in_grid(cfg.true_rates[t], &cfg.rate_grids[t]).is_none() {
            return fail(format!(
                "true rate {} for {} is not a candidate",
                cfg.true_rates[t], ROAD_TYPE_NAMES[t]
            ));
        }
        if in_grid(cfg.true_accident[t], &cfg.accident_grids[t]).is_none() {
            return fail(format!(
                "true accident probability {} for {} is not a candidate",
                cfg.true_accident[t], ROAD_TYPE_NAMES[t]
            ));
        }
    }
    for (label, [x, y]) in [("start", cfg.start), ("goal", cfg.goal)] {
        if x >= cfg.width || y >= cfg.height {
            return fail(format!("{label} cell ({x}, {y}) outside the grid"));
        }
        if cfg.map[y][x] < 0 {
            return fail(format!("{label} cell ({x}, {y}) is off-road"));
        }
    }
    Ok(())
}

/// Builds the discretized path-planning model.  States are the road cells
/// (the goal absorbing at zero cost); actions are {up, down, left, right}
/// restricted to roads; an accident on the destination's road type costs
/// `accident_delay` and leaves the agent in place, otherwise the agent moves
/// and pays the destination type's traversal time.
pub fn build_pathplanning(cfg: &PathPlanningConfig) -> Result<Env, EnvError> {
    validate_pathplanning(cfg)?;

    let rate_known: Vec<bool> = (0..4).map(|t| cfg.rate_grids[t].len() == 1).collect();
    let acc_possible: Vec<bool> =
        (0..4).map(|t| cfg.accident_grids[t].iter().any(|&p| p > 0.0)).collect();

    // Stochastic components of ξ and unknown parameter blocks, in road-type
    // order (time before accident within a type).
    let mut components = Vec::new();
    let mut bins_per_type: Vec<Option<ExpBins>> = vec![None; 4];
    for t in 0..4 {
        if !rate_known[t] {
            // Reference rate = slowest candidate, so the top bin's
            // representative keeps the slow regime's cost scale.
            let reference =
                cfg.rate_grids[t].iter().cloned().fold(f64::INFINITY, f64::min);
            bins_per_type[t] = Some(exponential_bins(reference, cfg.bins));
            components.push(Component::TimeBin { road_type: t });
        }
        if acc_possible[t] {
            components.push(Component::AccBit { road_type: t });
        }
    }
    if components.is_empty() {
        return Err(EnvError::InvalidConfig(
            "no stochastic components: every rate known and every accident probability zero"
                .into(),
        ));
    }
    let mut blocks = Vec::new();
    for t in 0..4 {
        if cfg.rate_grids[t].len() > 1 {
            blocks.push(Block::Rate { road_type: t });
        }
        if cfg.accident_grids[t].len() > 1 {
            blocks.push(Block::Accident { road_type: t });
        }
    }

    let component_sizes: Vec<usize> = components
        .iter()
        .map(|c| match c {
            Component::TimeBin { .. } => cfg.bins,
            Component::AccBit { .. } => 2,
        })
        .collect();
    let component_names: Vec<String> = components
        .iter()
        .map(|c| match c {
            Component::TimeBin { road_type } => format!("{}_time", ROAD_TYPE_NAMES[*road_type]),
            Component::AccBit { road_type } => {
                format!("{}_accident", ROAD_TYPE_NAMES[*road_type])
            }
        })
        .collect();
    let n_xi: usize = component_sizes.iter().product();

    let block_grid = |b: &Block| -> &[f64] {
        match b {
            Block::Rate { road_type } => &cfg.rate_grids[*road_type],
            Block::Accident { road_type } => &cfg.accident_grids[*road_type],
        }
    };
    let block_sizes: Vec<usize> = blocks.iter().map(|b| block_grid(b).len()).collect();
    let n_thetas: usize = block_sizes.iter().product::<usize>().max(1);
    if n_thetas > MAX_THETAS {
        return Err(EnvError::ThetaBudget { atoms: n_thetas, budget: MAX_THETAS });
    }

    // Parameter atoms: product over blocks, block 0 fastest-varying.
    let mut thetas = Vec::with_capacity(n_thetas);
    for code in 0..n_thetas {
        let mut rest = code;
        let mut vec = Vec::with_capacity(blocks.len());
        for (b, &size) in blocks.iter().zip(&block_sizes) {
            vec.push(block_grid(b)[rest % size]);
            rest /= size;
        }
        thetas.push(vec);
    }
    let true_theta = {
        let mut code = 0;
        let mut stride = 1;
        for (b, &size) in blocks.iter().zip(&block_sizes) {
            let truth = match b {
                Block::Rate { road_type } => cfg.true_rates[*road_type],
                Block::Accident { road_type } => cfg.true_accident[*road_type],
            };
            code += in_grid(truth, block_grid(b)).expect("validated membership") * stride;
            stride *= size;
        }
        code
    };

    // Per-type probability lookups under a θ atom.
    let rate_of = |theta: &[f64], t: usize| -> f64 {
        blocks
            .iter()
            .position(|b| matches!(b, Block::Rate { road_type } if *road_type == t))
            .map(|i| theta[i])
            .unwrap_or(cfg.rate_grids[t][0])
    };
    let acc_of = |theta: &[f64], t: usize| -> f64 {
        blocks
            .iter()
            .position(|b| matches!(b, Block::Accident { road_type } if *road_type == t))
            .map(|i| theta[i])
            .unwrap_or(cfg.accident_grids[t][0])
    };

    // Decode helper over the component layout.
    let decode = |xi: usize| -> Vec<usize> {
        let mut digits = Vec::with_capacity(component_sizes.len());
        let mut rest = xi;
        for &size in &component_sizes {
            digits.push(rest % size);
            rest /= size;
        }
        digits
    };

    if n_thetas.saturating_mul(n_xi) > MAX_TABLE_ENTRIES {
        return Err(EnvError::TableBudget {
            entries: n_thetas.saturating_mul(n_xi),
            budget: MAX_TABLE_ENTRIES,
        });
    }
    let likelihood: Vec<Vec<f64>> = thetas
        .iter()
        .map(|theta| {
            (0..n_xi)
                .map(|xi| {
                    let digits = decode(xi);
                    components
                        .iter()
                        .zip(&digits)
                        .map(|(c, &d)| match c {
                            Component::TimeBin { road_type } => {
                                let bins = bins_per_type[*road_type].as_ref().unwrap();
                                exponential_bin_probs(rate_of(theta, *road_type), &bins.bounds)
                                    [d]
                            }
                            Component::AccBit { road_type } => {
                                let p = acc_of(theta, *road_type);
                                if d == 1 {
                                    p
                                } else {
                                    1.0 - p
                                }
                            }
                        })
                        .product()
                })
                .collect()
        })
        .collect();
    let xi_support: Vec<Vec<f64>> = (0..n_xi)
        .map(|xi| {
            let digits = decode(xi);
            components
                .iter()
                .zip(&digits)
                .map(|(c, &d)| match c {
                    Component::TimeBin { road_type } => {
                        bins_per_type[*road_type].as_ref().unwrap().reps[d]
                    }
                    Component::AccBit { .. } => d as f64,
                })
                .collect()
        })
        .collect();

    // States: road cells, row-major.
    let mut state_of_cell = vec![vec![None; cfg.width]; cfg.height];
    let mut cells = Vec::new();
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            if cfg.map[y][x] >= 0 {
                state_of_cell[y][x] = Some(cells.len());
                cells.push((x, y));
            }
        }
    }
    let n_states = cells.len();
    if n_states > MAX_STATES {
        return Err(EnvError::StateBudget { states: n_states, budget: MAX_STATES });
    }
    let n_actions = 4;
    let table = n_states
        .saturating_mul(n_actions)
        .saturating_mul(n_xi);
    if table > MAX_TABLE_ENTRIES {
        return Err(EnvError::TableBudget { entries: table, budget: MAX_TABLE_ENTRIES });
    }

    let goal_state =
        state_of_cell[cfg.goal[1]][cfg.goal[0]].expect("goal validated on-road");
    let start_state =
        state_of_cell[cfg.start[1]][cfg.start[0]].expect("start validated on-road");

    // Mean traversal time for known-rate types (no time component in ξ).
    let known_mean: Vec<f64> = (0..4).map(|t| 1.0 / cfg.rate_grids[t][0]).collect();
    let time_component_of_type: Vec<Option<usize>> = (0..4)
        .map(|t| {
            components
                .iter()
                .position(|c| matches!(c, Component::TimeBin { road_type } if *road_type == t))
        })
        .collect();
    let acc_component_of_type: Vec<Option<usize>> = (0..4)
        .map(|t| {
            components
                .iter()
                .position(|c| matches!(c, Component::AccBit { road_type } if *road_type == t))
        })
        .collect();

    let mut admissible = vec![Vec::new(); n_states];
    let mut transition = vec![usize::MAX; table];
    let mut cost = vec![0.0; table];
    // Actions: 0 = up, 1 = down, 2 = left, 3 = right.
    let deltas: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];
    for (s, &(x, y)) in cells.iter().enumerate() {
        if s == goal_state {
            admissible[s].push(0);
            for xi in 0..n_xi {
                transition[(s * n_actions) * n_xi + xi] = s;
            }
            continue;
        }
        for (a, (dx, dy)) in deltas.iter().enumerate() {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx < 0 || ny < 0 || nx as usize >= cfg.width || ny as usize >= cfg.height {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            let Some(dest) = state_of_cell[ny][nx] else { continue };
            admissible[s].push(a);
            let dest_type = cfg.map[ny][nx] as usize;
            for xi in 0..n_xi {
                let digits = decode(xi);
                let idx = (s * n_actions + a) * n_xi + xi;
                let accident = acc_component_of_type[dest_type]
                    .map(|c| digits[c] == 1)
                    .unwrap_or(false);
                if accident {
                    transition[idx] = s;
                    cost[idx] = cfg.accident_delay;
                } else {
                    transition[idx] = dest;
                    cost[idx] = match time_component_of_type[dest_type] {
                        Some(c) => {
                            bins_per_type[dest_type].as_ref().unwrap().reps[digits[c]]
                        }
                        None => known_mean[dest_type],
                    };
                }
            }
        }
        if admissible[s].is_empty() {
            return Err(EnvError::InvalidConfig(format!(
                "road cell ({x}, {y}) has no road neighbor"
            )));
        }
    }

    // Goal reachability by BFS over the road adjacency.
    let mut seen = vec![false; n_states];
    let mut queue = VecDeque::from([start_state]);
    seen[start_state] = true;
    while let Some(s) = queue.pop_front() {
        for &a in &admissible[s] {
            for xi in 0..n_xi {
                let dest = transition[(s * n_actions + a) * n_xi + xi];
                if dest != usize::MAX && !seen[dest] {
                    seen[dest] = true;
                    queue.push_back(dest);
                }
            }
        }
    }
    if !seen[goal_state] {
        return Err(EnvError::UnreachableGoal);
    }

    let model = ModelSpec::new(
        n_states,
        n_actions,
        admissible,
        ParamSpace { thetas },
        xi_support,
        likelihood,
        transition,
        cost,
        cfg.discount,
    )
    .map_err(|e| EnvError::Model(e.to_string()))?;
    let violations = model.validate();
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(EnvError::Model(msgs.join("; ")));
    }
    Ok(Env { model, start_state, true_theta, component_names, component_sizes })
}

// ---------------------------------------------------------------------------
// Inventory control
// ---------------------------------------------------------------------------

/// Multi-item inventory control with truncated-Poisson demand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InventoryConfig {
    /// Per-item storage capacity `S_i` (item count `K` is the length).
    pub capacities: Vec<usize>,
    /// Per-item true Poisson demand rate.
    pub true_rates: Vec<f64>,
    /// Candidate demand rates, shared across items (Θ is the K-fold product).
    pub rate_grid: Vec<f64>,
    /// Per-item holding cost per unit left over.
    pub holding: Vec<f64>,
    /// Per-item penalty cost per unit of unmet demand.
    pub penalty: Vec<f64>,
    /// Demand truncation point (≥ max capacity); tail mass folds here.
    pub demand_cap: usize,
    pub discount: f64,
}

fn validate_inventory(cfg: &InventoryConfig) -> Result<(), EnvError> {
    let fail = |msg: String| Err(EnvError::InvalidConfig(msg));
    let k = cfg.capacities.len();
    if k == 0 {
        return fail("need at least one item".into());
    }
    if cfg.true_rates.len() != k || cfg.holding.len() != k || cfg.penalty.len() != k {
        return fail("per-item vectors must share the item count".into());
    }
    if cfg.rate_grid.is_empty() {
        return fail("candidate rate grid must be non-empty".into());
    }
    if cfg.rate_grid.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
        return fail("candidate rates must be positive".into());
    }
    for (i, &r) in cfg.true_rates.iter().enumerate() {
        if in_grid(r, &cfg.rate_grid).is_none() {
            return fail(format!("true rate {r} for item {i} is not a candidate"));
        }
    }
    if cfg.holding.iter().chain(&cfg.penalty).any(|&c| !(c.is_finite() && c >= 0.0)) {
        return fail("holding and penalty costs must be nonnegative".into());
    }
    let max_cap = cfg.capacities.iter().copied().max().unwrap();
    if cfg.demand_cap < max_cap {
        return fail(format!(
            "demand truncation point {} below the largest capacity {max_cap}",
            cfg.demand_cap
        ));
    }
    if !(0.0..1.0).contains(&cfg.discount) {
        return fail(format!("discount {} outside [0, 1)", cfg.discount));
    }
    Ok(())
}

/// Builds the inventory model.  States and actions are mixed-radix level
/// vectors (item 0 fastest-varying); an action is admissible when it does
/// not overfill any item; demand is truncated Poisson per item.
pub fn build_inventory(cfg: &InventoryConfig) -> Result<Env, EnvError> {
    validate_inventory(cfg)?;
    let k = cfg.capacities.len();
    let level_sizes: Vec<usize> = cfg.capacities.iter().map(|&s| s + 1).collect();

    let mut n_states: usize = 1;
    for &size in &level_sizes {
        n_states = n_states.saturating_mul(size);
    }
    if n_states > MAX_STATES {
        return Err(EnvError::StateBudget { states: n_states, budget: MAX_STATES });
    }
    let n_actions = n_states;
    let demand_sizes: Vec<usize> = vec![cfg.demand_cap + 1; k];
    let n_xi: usize = demand_sizes.iter().product();
    let table = n_states.saturating_mul(n_actions).saturating_mul(n_xi);
    if table > MAX_TABLE_ENTRIES {
        return Err(EnvError::TableBudget { entries: table, budget: MAX_TABLE_ENTRIES });
    }

    let decode = |code: usize, sizes: &[usize]| -> Vec<usize> {
        let mut digits = Vec::with_capacity(sizes.len());
        let mut rest = code;
        for &size in sizes {
            digits.push(rest % size);
            rest /= size;
        }
        digits
    };

    // Parameter atoms: per-item rate indices, item 0 fastest-varying.
    let n_thetas = cfg.rate_grid.len().checked_pow(k as u32).unwrap_or(usize::MAX);
    if n_thetas > MAX_THETAS {
        return Err(EnvError::ThetaBudget { atoms: n_thetas, budget: MAX_THETAS });
    }
    let theta_sizes = vec![cfg.rate_grid.len(); k];
    let thetas: Vec<Vec<f64>> = (0..n_thetas)
        .map(|code| decode(code, &theta_sizes).iter().map(|&i| cfg.rate_grid[i]).collect())
        .collect();
    let true_theta = {
        let mut code = 0;
        let mut stride = 1;
        for &r in &cfg.true_rates {
            code += in_grid(r, &cfg.rate_grid).expect("validated membership") * stride;
            stride *= cfg.rate_grid.len();
        }
        code
    };

    if n_thetas.saturating_mul(n_xi) > MAX_TABLE_ENTRIES {
        return Err(EnvError::TableBudget {
            entries: n_thetas.saturating_mul(n_xi),
            budget: MAX_TABLE_ENTRIES,
        });
    }
    // Truncated pmf per candidate rate, shared across items.
    let pmf_per_rate: Vec<Vec<f64>> =
        cfg.rate_grid.iter().map(|&r| truncated_poisson(r, cfg.demand_cap)).collect();
    let likelihood: Vec<Vec<f64>> = (0..n_thetas)
        .map(|t_code| {
            let rate_idx = decode(t_code, &theta_sizes);
            (0..n_xi)
                .map(|xi| {
                    decode(xi, &demand_sizes)
                        .iter()
                        .zip(&rate_idx)
                        .map(|(&d, &ri)| pmf_per_rate[ri][d])
                        .product()
                })
                .collect()
        })
        .collect();
    let xi_support: Vec<Vec<f64>> = (0..n_xi)
        .map(|xi| decode(xi, &demand_sizes).iter().map(|&d| d as f64).collect())
        .collect();

    let mut admissible = vec![Vec::new(); n_states];
    let mut transition = vec![usize::MAX; table];
    let mut cost = vec![0.0; table];
    for s in 0..n_states {
        let levels = decode(s, &level_sizes);
        for a in 0..n_actions {
            let amounts = decode(a, &level_sizes);
            if levels.iter().zip(&amounts).zip(&cfg.capacities).any(|((&l, &r), &cap)| l + r > cap)
            {
                continue;
            }
            admissible[s].push(a);
            for xi in 0..n_xi {
                let demand = decode(xi, &demand_sizes);
                let mut next = 0;
                let mut stride = 1;
                let mut c = 0.0;
                for i in 0..k {
                    let stocked = levels[i] + amounts[i];
                    let leftover = stocked.saturating_sub(demand[i]);
                    let shortage = demand[i].saturating_sub(stocked);
                    c += cfg.holding[i] * leftover as f64 + cfg.penalty[i] * shortage as f64;
                    next += leftover * stride;
                    stride *= level_sizes[i];
                }
                let idx = (s * n_actions + a) * n_xi + xi;
                transition[idx] = next;
                cost[idx] = c;
            }
        }
    }

    let model = ModelSpec::new(
        n_states,
        n_actions,
        admissible,
        ParamSpace { thetas },
        xi_support,
        likelihood,
        transition,
        cost,
        cfg.discount,
    )
    .map_err(|e| EnvError::Model(e.to_string()))?;
    let violations = model.validate();
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(EnvError::Model(msgs.join("; ")));
    }
    let component_names = (0..k).map(|i| format!("item{i}_demand")).collect();
    Ok(Env {
        model,
        start_state: 0,
        true_theta,
        component_names,
        component_sizes: demand_sizes,
    })
}

// ---------------------------------------------------------------------------
// Datasets and priors
// ---------------------------------------------------------------------------

/// Draws `n` i.i.d. observations from the true-parameter outcome
/// distribution; fully determined by `seed`.
pub fn sample_dataset(env: &Env, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = &env.model.likelihood[env.true_theta];
    (0..n).map(|_| sample_discrete(&mut rng, probs)).collect()
}

/// Posterior over the candidate parameters from a uniform prior:
/// `μ₁(θ) ∝ Π_j f(ξ_j; θ)`, accumulated in log space so large datasets do
/// not underflow.  Independent parameter blocks multiply automatically
/// because the likelihood factorizes.
pub fn posterior_from_data(model: &ModelSpec, observations: &[usize]) -> Result<Belief, EnvError> {
    let n = model.n_thetas();
    let mut loglik = vec![0.0f64; n];
    for &xi in observations {
        for (theta, ll) in loglik.iter_mut().enumerate() {
            *ll += model.f(xi, theta).ln();
        }
    }
    let best = loglik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(EnvError::ZeroPosteriorMass);
    }
    let mut probs: Vec<f64> = loglik.iter().map(|&l| (l - best).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(Belief::new(probs).expect("normalized posterior is a belief"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_seed;

    /// 2×1 corridor with one road type: unknown rate (2 candidates) and
    /// possible accidents.
    fn corridor_config() -> PathPlanningConfig {
        PathPlanningConfig {
            width: 2,
            height: 1,
            map: vec![vec![0, 0]],
            start: [0, 0],
            goal: [1, 0],
            true_rates: [1.0, 1.0, 1.0, 1.0],
            true_accident: [0.3, 0.0, 0.0, 0.0],
            rate_grids: [vec![0.5, 1.0], vec![1.0], vec![1.0], vec![1.0]],
            accident_grids: [vec![0.1, 0.3], vec![0.0], vec![0.0], vec![0.0]],
            accident_delay: 10.0,
            bins: 2,
            discount: 0.9,
        }
    }

    #[test]
    fn corridor_outcome_and_parameter_counting() {
        let env = build_pathplanning(&corridor_config()).unwrap();
        assert_eq!(env.model.n_xi(), 4, "2 bins x 2 accident bits");
        assert_eq!(env.model.n_thetas(), 4, "2 rates x 2 accident probabilities");
        assert_eq!(env.component_sizes, vec![2, 2]);
        assert_eq!(env.component_names, vec!["highway_time", "highway_accident"]);
        assert!(env.model.validate().is_empty());
    }

    #[test]
    fn accident_bit_marginal_matches_parameter() {
        let env = build_pathplanning(&corridor_config()).unwrap();
        // Find the atom with true rate 1.0 and accident probability 0.3.
        let theta = env
            .model
            .params
            .thetas
            .iter()
            .position(|v| (v[0] - 1.0).abs() < 1e-12 && (v[1] - 0.3).abs() < 1e-12)
            .unwrap();
        assert_eq!(theta, env.true_theta);
        let marginal: f64 = (0..env.model.n_xi())
            .filter(|&xi| env.decode_observation(xi)[1] == 1)
            .map(|xi| env.model.f(xi, theta))
            .sum();
        assert!((marginal - 0.3).abs() < 1e-12);
    }

    #[test]
    fn reference_rate_bins_are_uniform() {
        for m in [2, 4, 7] {
            let bins = exponential_bins(0.2, m);
            let probs = exponential_bin_probs(0.2, &bins.bounds);
            for &p in &probs {
                assert!((p - 1.0 / m as f64).abs() < 1e-9, "m={m} p={p}");
            }
        }
    }

    #[test]
    fn bin_probabilities_normalize_for_every_candidate() {
        let bins = exponential_bins(0.1, 4);
        for rate in [0.05, 0.1, 0.5, 1.0, 2.5] {
            let probs = exponential_bin_probs(rate, &bins.bounds);
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "rate {rate} sums to {total}");
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn bin_representatives_strictly_increase() {
        for (rate, m) in [(0.1, 4), (1.0, 6), (2.5, 3)] {
            let bins = exponential_bins(rate, m);
            for pair in bins.reps.windows(2) {
                assert!(pair[0] < pair[1], "rate {rate}: {:?}", bins.reps);
            }
            // Representatives live inside their bins.
            for (k, &rep) in bins.reps.iter().enumerate() {
                assert!(rep > bins.bounds[k]);
                assert!(rep < bins.bounds[k + 1] || bins.bounds[k + 1].is_infinite());
            }
        }
    }

    #[test]
    fn whole_distribution_mean_is_preserved_by_binning() {
        // Equal-probability bins with conditional-mean representatives keep
        // the overall mean: Σ (1/m) E[X | bin] = E[X] = 1/λ.
        let bins = exponential_bins(0.4, 5);
        let mean: f64 = bins.reps.iter().sum::<f64>() / 5.0;
        assert!((mean - 1.0 / 0.4).abs() < 1e-9);
    }

    #[test]
    fn accident_semantics_stay_and_pay_delay() {
        let env = build_pathplanning(&corridor_config()).unwrap();
        let m = &env.model;
        // State 0 = start (0,0); action 3 = right into the goal cell.
        assert_eq!(m.admissible[0], vec![3]);
        for xi in 0..m.n_xi() {
            let digits = env.decode_observation(xi);
            if digits[1] == 1 {
                assert_eq!(m.g(0, 3, xi), 0, "accident keeps the agent in place");
                assert_eq!(m.stage_cost(0, 3, xi), 10.0);
            } else {
                assert_eq!(m.g(0, 3, xi), 1);
                // Traversal cost is the observed bin's representative under
                // the reference (slowest candidate) rate 0.5.
                let bins = exponential_bins(0.5, 2);
                assert!((m.stage_cost(0, 3, xi) - bins.reps[digits[0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn goal_is_absorbing_zero_cost() {
        let env = build_pathplanning(&corridor_config()).unwrap();
        assert!(env.model.is_absorbing_zero_cost(1));
        assert!(!env.model.is_absorbing_zero_cost(0));
    }

    #[test]
    fn known_rate_types_fold_to_deterministic_mean() {
        let mut cfg = corridor_config();
        // Make the single type's rate known; only the accident bit remains.
        cfg.rate_grids[0] = vec![0.5];
        cfg.true_rates[0] = 0.5;
        let env = build_pathplanning(&cfg).unwrap();
        assert_eq!(env.model.n_xi(), 2);
        assert_eq!(env.component_names, vec!["highway_accident"]);
        // Move right without accident: deterministic mean 1 / 0.5.
        let xi = env.encode_observation(&[0]).unwrap();
        assert!((env.model.stage_cost(0, 3, xi) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_goal_is_an_error() {
        let mut cfg = corridor_config();
        cfg.width = 3;
        cfg.map = vec![vec![0, -1, 0]];
        cfg.goal = [2, 0];
        // Both road cells are isolated; the builder reports the break in
        // connectivity (as a missing-neighbor error before BFS).
        assert!(build_pathplanning(&cfg).is_err());

        // A connected component that simply misses the goal.
        let mut cfg = corridor_config();
        cfg.width = 4;
        cfg.height = 2;
        cfg.map = vec![vec![0, 0, -1, -1], vec![-1, -1, 0, 0]];
        cfg.start = [0, 0];
        cfg.goal = [3, 1];
        let err = build_pathplanning(&cfg).unwrap_err();
        assert!(matches!(err, EnvError::UnreachableGoal), "{err}");
    }

    #[test]
    fn config_validation_rejects_bad_parameters() {
        let mut cfg = corridor_config();
        cfg.true_rates[0] = 0.7; // not a candidate
        assert!(matches!(build_pathplanning(&cfg), Err(EnvError::InvalidConfig(_))));
        let mut cfg = corridor_config();
        cfg.bins = 1;
        assert!(matches!(build_pathplanning(&cfg), Err(EnvError::InvalidConfig(_))));
        let mut cfg = corridor_config();
        cfg.start = [1, 1];
        assert!(matches!(build_pathplanning(&cfg), Err(EnvError::InvalidConfig(_))));
    }

    fn tiny_inventory() -> InventoryConfig {
        InventoryConfig {
            capacities: vec![2],
            true_rates: vec![1.0],
            rate_grid: vec![0.5, 1.0],
            holding: vec![2.0],
            penalty: vec![4.0],
            demand_cap: 3,
            discount: 0.9,
        }
    }

    #[test]
    fn single_item_counting_and_admissibility() {
        let env = build_inventory(&tiny_inventory()).unwrap();
        assert_eq!(env.model.n_states, 3);
        // Replenish up to capacity: state s admits actions {0, .., 2-s}.
        assert_eq!(env.model.admissible[0], vec![0, 1, 2]);
        assert_eq!(env.model.admissible[1], vec![0, 1]);
        assert_eq!(env.model.admissible[2], vec![0]);
        assert!(env.model.validate().is_empty());
    }

    #[test]
    fn zero_demand_cost_is_pure_holding() {
        let env = build_inventory(&tiny_inventory()).unwrap();
        let xi = env.encode_observation(&[0]).unwrap();
        // s = 1, a = 1: stocked 2, demand 0 → cost 2 · h.
        assert!((env.model.stage_cost(1, 1, xi) - 4.0).abs() < 1e-12);
        assert_eq!(env.model.g(1, 1, xi), 2);
    }

    #[test]
    fn shortage_cost_and_transition_clamp() {
        let env = build_inventory(&tiny_inventory()).unwrap();
        let xi = env.encode_observation(&[3]).unwrap();
        // s = 0, a = 1: stocked 1, demand 3 → shortage 2, next level 0.
        assert!((env.model.stage_cost(0, 1, xi) - 8.0).abs() < 1e-12);
        assert_eq!(env.model.g(0, 1, xi), 0);
    }

    #[test]
    fn truncated_poisson_normalizes_and_folds_tail() {
        for rate in [0.5, 2.0, 3.0, 5.0] {
            let pmf = truncated_poisson(rate, 6);
            let total: f64 = pmf.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            // The cap holds at least the untruncated mass at the cap.
            let exact = (-rate as f64).exp() * rate.powi(6) / 720.0;
            assert!(pmf[6] >= exact - 1e-12);
        }
    }

    #[test]
    fn two_item_expected_cost_matches_brute_force() {
        let cfg = InventoryConfig {
            capacities: vec![5, 5],
            true_rates: vec![2.0, 3.0],
            rate_grid: vec![2.0, 3.0],
            holding: vec![2.0, 3.0],
            penalty: vec![4.0, 5.0],
            demand_cap: 7,
            discount: 0.9,
        };
        let env = build_inventory(&cfg).unwrap();
        // θ = (2, 3); state (0,0); action (5,5).
        let theta = env
            .model
            .params
            .thetas
            .iter()
            .position(|v| v == &vec![2.0, 3.0])
            .unwrap();
        let action = 5 + 5 * 6;
        let got = env.model.expected_cost(0, action, theta);
        let p0 = truncated_poisson(2.0, 7);
        let p1 = truncated_poisson(3.0, 7);
        let mut want = 0.0;
        for (d0, &q0) in p0.iter().enumerate() {
            for (d1, &q1) in p1.iter().enumerate() {
                let left0 = (5i64 - d0 as i64).max(0) as f64;
                let short0 = (d0 as i64 - 5).max(0) as f64;
                let left1 = (5i64 - d1 as i64).max(0) as f64;
                let short1 = (d1 as i64 - 5).max(0) as f64;
                want += q0 * q1 * (2.0 * left0 + 4.0 * short0 + 3.0 * left1 + 5.0 * short1);
            }
        }
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn inventory_budget_errors_name_the_remedy() {
        let cfg = InventoryConfig {
            capacities: vec![100; 5],
            true_rates: vec![10.0; 5],
            rate_grid: (5..=35).map(f64::from).collect(),
            holding: vec![2.0; 5],
            penalty: vec![4.0; 5],
            demand_cap: 100,
            discount: 0.95,
        };
        let err = build_inventory(&cfg).unwrap_err();
        assert!(matches!(err, EnvError::StateBudget { .. }));
        assert!(err.to_string().contains("shrink K or S_i"));
    }

    #[test]
    fn observation_codec_roundtrips() {
        let env = build_pathplanning(&corridor_config()).unwrap();
        for xi in 0..env.model.n_xi() {
            let digits = env.decode_observation(xi);
            assert_eq!(env.encode_observation(&digits), Some(xi));
        }
        assert_eq!(env.encode_observation(&[9, 0]), None);
        assert_eq!(env.encode_observation(&[0]), None);
    }

    #[test]
    fn dataset_csv_roundtrips() {
        let env = build_pathplanning(&corridor_config()).unwrap();
        let obs = sample_dataset(&env, 25, 7);
        let csv = env.dataset_to_csv(&obs);
        assert!(csv.starts_with("highway_time,highway_accident\n"));
        assert_eq!(env.dataset_from_csv(&csv).unwrap(), obs);
    }

    #[test]
    fn dataset_sampling_is_seed_deterministic() {
        let env = build_inventory(&tiny_inventory()).unwrap();
        assert!(sample_dataset(&env, 0, 3).is_empty());
        let a = sample_dataset(&env, 100, 42);
        let b = sample_dataset(&env, 100, 42);
        assert_eq!(a, b);
        let c = sample_dataset(&env, 100, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn large_sample_mean_close_to_poisson_rate() {
        let cfg = InventoryConfig {
            capacities: vec![30],
            true_rates: vec![10.0],
            rate_grid: vec![5.0, 10.0, 15.0],
            holding: vec![1.0],
            penalty: vec![2.0],
            demand_cap: 30,
            discount: 0.9,
        };
        let env = build_inventory(&cfg).unwrap();
        let n = 100_000;
        let obs = sample_dataset(&env, n, derive_seed(9, &[4]));
        let mean = obs.iter().map(|&xi| env.decode_observation(xi)[0] as f64).sum::<f64>()
            / n as f64;
        // 3σ/√N sanity band (σ² = 10 for Poisson(10); truncation at 30 is
        // negligible at this rate).
        let band = 3.0 * (10.0f64).sqrt() / (n as f64).sqrt();
        assert!((mean - 10.0).abs() < band, "mean {mean}, band {band}");
    }

    #[test]
    fn empty_dataset_gives_uniform_prior() {
        let env = build_pathplanning(&corridor_config()).unwrap();
        let mu = posterior_from_data(&env.model, &[]).unwrap();
        for &p in mu.probs() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_bernoulli_observation_hand_posterior() {
        // One road type, known rate, unknown accident probability over
        // {0.2, 0.8}: a single accident observation gives μ ∝ (0.2, 0.8).
        let mut cfg = corridor_config();
        cfg.rate_grids[0] = vec![1.0];
        cfg.true_rates[0] = 1.0;
        cfg.accident_grids[0] = vec![0.2, 0.8];
        cfg.true_accident[0] = 0.2;
        let env = build_pathplanning(&cfg).unwrap();
        assert_eq!(env.model.n_xi(), 2);
        let success = env.encode_observation(&[1]).unwrap();
        let mu = posterior_from_data(&env.model, &[success]).unwrap();
        assert!((mu.probs()[0] - 0.2).abs() < 1e-12);
        assert!((mu.probs()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn posterior_concentrates_with_data() {
        let env = build_inventory(&tiny_inventory()).unwrap();
        let obs = sample_dataset(&env, 10_000, derive_seed(9, &[5]));
        let mu = posterior_from_data(&env.model, &obs).unwrap();
        assert!(mu.probs()[env.true_theta] >= 0.99, "{:?}", mu.probs());
    }

    #[test]
    fn impossible_dataset_is_an_error() {
        // Accident grid {0, 1}: seeing both outcomes kills every atom.
        let mut cfg = corridor_config();
        cfg.rate_grids[0] = vec![1.0];
        cfg.true_rates[0] = 1.0;
        cfg.accident_grids[0] = vec![0.0, 1.0];
        cfg.true_accident[0] = 0.0;
        let env = build_pathplanning(&cfg).unwrap();
        let hit = env.encode_observation(&[1]).unwrap();
        let miss = env.encode_observation(&[0]).unwrap();
        assert!(matches!(
            posterior_from_data(&env.model, &[hit, miss]),
            Err(EnvError::ZeroPosteriorMass)
        ));
        // One-sided data stays legal.
        assert!(posterior_from_data(&env.model, &[miss, miss]).is_ok());
    }
}
