//! Experiment orchestration: replications over independent datasets, policy
//! evaluation on the true system, metric tables, and histogram data.
//!
//! A replication draws a dataset from the true parameters, builds the
//! posterior μ₁, plans once per method, and simulates one episode on the
//! true-θ MDP.  Within a replication every method sees the same dataset and
//! the same randomness stream (common random numbers; the outcome process is
//! state-independent, so the streams stay coherent across diverging
//! trajectories).  Episodes truncate when the discounted tail bound
//! γᵗ·C_max/(1−γ) drops below η, giving a uniformly η-accurate estimate of
//! the infinite-horizon discounted cost.

use crate::belief::bayes_update;
use crate::ccp::{CcpOptions, SubproblemMode, ValueTable};
use crate::envs::{
    build_inventory, build_pathplanning, posterior_from_data, sample_dataset, Env, EnvError,
    InventoryConfig, PathPlanningConfig,
};
use crate::model::{Belief, ModelSpec};
use crate::planner::{abdcp, act, AbdcpOptions, AbdcpResult};
use crate::reference::{solve_drmdp, solve_nominal_from_outcomes};
use crate::risk::RiskSpec;
use crate::util::{derive_seed, sample_discrete};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Candidate parameters with posterior mass above this enter the DR-MDP
/// uncertainty set.
pub const DR_INCLUSION_THRESHOLD: f64 = 1e-3;
/// Histogram bins when the cost spread is non-degenerate.
pub const HISTOGRAM_BINS: usize = 30;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Methods and configuration
// ---------------------------------------------------------------------------

/// A planning method under evaluation.  The string forms are `abdcp-exp`,
/// `abdcp-cvar(α)` (e.g. `abdcp-cvar(0.95)`), `drmdp`, and `nominal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    AbdcpExp,
    AbdcpCvar { alpha: f64 },
    Drmdp,
    Nominal,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::AbdcpExp => write!(f, "abdcp-exp"),
            Method::AbdcpCvar { alpha } => write!(f, "abdcp-cvar({alpha})"),
            Method::Drmdp => write!(f, "drmdp"),
            Method::Nominal => write!(f, "nominal"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "abdcp-exp" => return Ok(Method::AbdcpExp),
            "drmdp" => return Ok(Method::Drmdp),
            "nominal" => return Ok(Method::Nominal),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("abdcp-cvar(") {
            if let Some(arg) = rest.strip_suffix(')') {
                let alpha: f64 = arg
                    .trim()
                    .parse()
                    .map_err(|_| HarnessError::InvalidConfig(format!("bad CVaR level in {s:?}")))?;
                if !(0.0..1.0).contains(&alpha) {
                    return Err(HarnessError::InvalidConfig(format!(
                        "CVaR level {alpha} outside [0, 1)"
                    )));
                }
                return Ok(Method::AbdcpCvar { alpha });
            }
        }
        Err(HarnessError::InvalidConfig(format!(
            "unrecognized method {s:?} (expected abdcp-exp, abdcp-cvar(α), drmdp, or nominal)"
        )))
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse().map_err(|e: HarnessError| e.to_string())
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// Environment description inside an experiment config: either a path to an
/// environment JSON file or the config inlined.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentRef {
    Path(String),
    Inline(EnvironmentConfig),
}

/// Tagged union of the benchmark environment configs (the `kind` field
/// selects the builder).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    PathPlanning(PathPlanningConfig),
    Inventory(InventoryConfig),
}

/// Builds the environment an [`EnvironmentConfig`] describes.
pub fn build_environment(cfg: &EnvironmentConfig) -> Result<Env, EnvError> {
    match cfg {
        EnvironmentConfig::PathPlanning(c) => build_pathplanning(c),
        EnvironmentConfig::Inventory(c) => build_inventory(c),
    }
}

fn default_eta() -> f64 {
    1e-3
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_n_new() -> usize {
    10
}
fn default_max_outer() -> usize {
    50
}
fn default_ccp_tol() -> f64 {
    1e-6
}
fn default_fp_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentRef,
    pub methods: Vec<Method>,
    /// Observations per replication dataset (N).
    pub dataset_size: usize,
    /// Replication count (R).
    pub replications: usize,
    pub master_seed: u64,
    /// Discounted-tail truncation level η.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Target certified gap ε for the ABDCP methods.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Posterior-set growth budget per outer iteration.
    #[serde(default = "default_n_new")]
    pub n_new: usize,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_ccp_tol")]
    pub ccp_tol: f64,
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    /// Default output directory (the CLI's `--out` overrides it).
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replications == 0 {
            return Err(HarnessError::InvalidConfig("need at least one replication".into()));
        }
        if self.methods.is_empty() {
            return Err(HarnessError::InvalidConfig("method list is empty".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(HarnessError::InvalidConfig(format!(
                "truncation level {} must be positive",
                self.eta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(HarnessError::InvalidConfig(format!(
                "target gap {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Planner options shared by both ABDCP methods.
    pub fn abdcp_options(&self) -> AbdcpOptions {
        AbdcpOptions {
            epsilon: self.epsilon,
            n_new: self.n_new,
            max_outer: self.max_outer,
            ccp: CcpOptions {
                tol: self.ccp_tol,
                max_iter: 100,
                mode: SubproblemMode::FixedPoint,
                fp_tol: self.fp_tol,
            },
            eval_tol: 1e-9,
        }
    }
}

/// Reads an experiment config from JSON.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the experiment's environment config, resolving a relative file
/// reference against `base_dir` (normally the experiment config's directory).
pub fn resolve_environment_config(
    cfg: &ExperimentConfig,
    base_dir: &Path,
) -> Result<EnvironmentConfig, HarnessError> {
    match &cfg.environment {
        EnvironmentRef::Inline(env_cfg) => Ok(env_cfg.clone()),
        EnvironmentRef::Path(p) => {
            let path = PathBuf::from(p);
            let path = if path.is_absolute() { path } else { base_dir.join(path) };
            let text = std::fs::read_to_string(&path)?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))
        }
    }
}

/// [`resolve_environment_config`] followed by the builder.
pub fn resolve_environment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Env, HarnessError> {
    Ok(build_environment(&resolve_environment_config(cfg, base_dir)?)?)
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// Smallest horizon T with `γ^T · C_max/(1−γ) ≤ η`: simulating T steps
/// estimates the infinite-horizon discounted cost within η.
pub fn truncation_horizon(c_max: f64, discount: f64, eta: f64) -> usize {
    if c_max <= 0.0 || c_max / (1.0 - discount) <= eta {
        return 0;
    }
    if discount == 0.0 {
        return 1;
    }
    ((eta * (1.0 - discount) / c_max).ln() / discount.ln()).ceil() as usize
}

/// One row of an episode trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceStep {
    pub t: usize,
    pub state: usize,
    pub action: usize,
    pub xi: usize,
    pub stage_cost: f64,
}

/// How a method picks actions during the episode.
enum Actor<'a> {
    /// Online belief tracking + one-step lookahead on the planner's value
    /// table (the BR-MDP methods).
    Belief { values: &'a ValueTable, result: &'a AbdcpResult, risk: RiskSpec, mu: Belief },
    /// State-indexed stationary policy (the baselines).
    Fixed(&'a [usize]),
}

struct EpisodeOutcome {
    cost: f64,
    steps: usize,
}

fn simulate_episode(
    model: &ModelSpec,
    true_theta: usize,
    absorbing: &[bool],
    mut actor: Actor<'_>,
    start_state: usize,
    t_max: usize,
    seed: u64,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<EpisodeOutcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = &model.likelihood[true_theta];
    let mut state = start_state;
    let mut cost = 0.0;
    let mut discount_pow = 1.0;
    let mut steps = 0;
    for t in 0..t_max {
        if absorbing[state] {
            break;
        }
        let action = match &actor {
            Actor::Belief { values, result, risk, mu } => {
                act(values, result.final_set(), model, *risk, state, mu)
                    .map_err(|e| e.to_string())?
            }
            Actor::Fixed(policy) => policy[state],
        };
        let xi = sample_discrete(&mut rng, probs);
        let stage = model.stage_cost(state, action, xi);
        cost += discount_pow * stage;
        discount_pow *= model.discount;
        if let Some(out) = trace.as_mut() {
            out.push(TraceStep { t, state, action, xi, stage_cost: stage });
        }
        state = model.g(state, action, xi);
        if let Actor::Belief { mu, .. } = &mut actor {
            // A zero-predictive observation leaves the belief unchanged.
            if let Ok(updated) = bayes_update(model, mu, xi) {
                *mu = updated;
            }
        }
        steps = t + 1;
    }
    Ok(EpisodeOutcome { cost, steps })
}

// ---------------------------------------------------------------------------
// Replications
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Ok => write!(f, "ok"),
            RunStatus::Failed => write!(f, "failed"),
        }
    }
}

/// Result of one (replication, method) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub method: Method,
    /// Episode seed (shared across methods within the replication).
    pub seed: u64,
    pub status: RunStatus,
    /// Realized discounted cost (NaN when the solver failed).
    pub cost: f64,
    /// Planning wall time in seconds (excluded from determinism contracts).
    pub plan_time_s: f64,
    pub episode_len: usize,
}

enum Plan {
    Belief { result: Box<AbdcpResult>, risk: RiskSpec },
    Fixed(Vec<usize>),
}

fn plan_method(
    env: &Env,
    cfg: &ExperimentConfig,
    method: Method,
    dataset: &[usize],
    mu1: &Belief,
) -> Result<Plan, String> {
    match method {
        Method::AbdcpExp | Method::AbdcpCvar { .. } => {
            let risk = match method {
                Method::AbdcpCvar { alpha } => RiskSpec::Cvar { alpha },
                _ => RiskSpec::Expectation,
            };
            let result = abdcp(&env.model, risk, env.start_state, mu1, &cfg.abdcp_options())
                .map_err(|e| e.to_string())?;
            Ok(Plan::Belief { result: Box::new(result), risk })
        }
        Method::Nominal => {
            let sol = solve_nominal_from_outcomes(&env.model, dataset).map_err(|e| e.to_string())?;
            Ok(Plan::Fixed(sol.policy))
        }
        Method::Drmdp => {
            let mut subset: Vec<usize> = mu1
                .probs()
                .iter()
                .enumerate()
                .filter(|&(_, &p)| p > DR_INCLUSION_THRESHOLD)
                .map(|(i, _)| i)
                .collect();
            if subset.is_empty() {
                // Degenerate posterior: fall back to the mode.
                let mode = mu1
                    .probs()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                subset.push(mode);
            }
            let sol = solve_drmdp(&env.model, &subset).map_err(|e| e.to_string())?;
            Ok(Plan::Fixed(sol.policy))
        }
    }
}

fn run_replication_inner(
    env: &Env,
    cfg: &ExperimentConfig,
    absorbing: &[bool],
    t_max: usize,
    rep: usize,
) -> Vec<ReplicationRecord> {
    let dataset_seed = derive_seed(cfg.master_seed, &[rep as u64, 0]);
    let episode_seed = derive_seed(cfg.master_seed, &[rep as u64, 1]);
    let dataset = sample_dataset(env, cfg.dataset_size, dataset_seed);
    let mu1 = posterior_from_data(&env.model, &dataset);

    let mut records = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let failed = |plan_time_s: f64, message: String| {
            eprintln!("rep {rep} {method}: {message}");
            ReplicationRecord {
                rep,
                method,
                seed: episode_seed,
                status: RunStatus::Failed,
                cost: f64::NAN,
                plan_time_s,
                episode_len: 0,
            }
        };
        let mu1 = match &mu1 {
            Ok(mu) => mu,
            Err(e) => {
                records.push(failed(0.0, e.to_string()));
                continue;
            }
        };
        let t0 = Instant::now();
        let plan = plan_method(env, cfg, method, &dataset, mu1);
        let plan_time_s = t0.elapsed().as_secs_f64();
        let record = match plan {
            Err(msg) => failed(plan_time_s, msg),
            Ok(plan) => {
                let actor = match &plan {
                    Plan::Belief { result, risk } => Actor::Belief {
                        values: &result.values,
                        result,
                        risk: *risk,
                        mu: mu1.clone(),
                    },
                    Plan::Fixed(policy) => Actor::Fixed(policy),
                };
                match simulate_episode(
                    &env.model,
                    env.true_theta,
                    absorbing,
                    actor,
                    env.start_state,
                    t_max,
                    episode_seed,
                    None,
                ) {
                    Ok(outcome) => ReplicationRecord {
                        rep,
                        method,
                        seed: episode_seed,
                        status: RunStatus::Ok,
                        cost: outcome.cost,
                        plan_time_s,
                        episode_len: outcome.steps,
                    },
                    Err(msg) => failed(plan_time_s, msg),
                }
            }
        };
        records.push(record);
    }
    records
}

/// Runs one replication (dataset → posterior → plan per method → one episode
/// per method on the true system) and returns one record per method.
pub fn run_replication(env: &Env, cfg: &ExperimentConfig, rep: usize) -> Vec<ReplicationRecord> {
    let absorbing: Vec<bool> =
        (0..env.model.n_states).map(|s| env.model.is_absorbing_zero_cost(s)).collect();
    let t_max = truncation_horizon(env.model.c_max(), env.model.discount, cfg.eta);
    run_replication_inner(env, cfg, &absorbing, t_max, rep)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Empirical CVaR_α: the mean of the ⌈(1−α)·k⌉ largest costs.
pub fn empirical_cvar(costs: &[f64], alpha: f64) -> f64 {
    let k = costs.len();
    if k == 0 {
        return f64::NAN;
    }
    // Guard the ceiling against float error in (1−α)·k (e.g. 0.05·100 →
    // 5.000000000000004 must stay 5 largest, not 6).
    let m = ((((1.0 - alpha) * k as f64) - 1e-9).ceil() as usize).clamp(1, k);
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[..m].iter().sum::<f64>() / m as f64
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

/// One `metrics.csv` row: statistics of a method's successful replications.
#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub mean: f64,
    pub se: f64,
    pub cvar95: f64,
    pub cvar80: f64,
    pub time_mean: f64,
    pub time_se: f64,
}

/// Per-method statistics over the successful records, in method order.
pub fn summarize(methods: &[Method], records: &[ReplicationRecord]) -> Vec<MethodMetrics> {
    methods
        .iter()
        .map(|&method| {
            let ok: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|r| r.method == method && r.status == RunStatus::Ok)
                .collect();
            let costs: Vec<f64> = ok.iter().map(|r| r.cost).collect();
            let times: Vec<f64> = ok.iter().map(|r| r.plan_time_s).collect();
            let (mean, se) = mean_se(&costs);
            let (time_mean, time_se) = mean_se(&times);
            MethodMetrics {
                method,
                mean,
                se,
                cvar95: empirical_cvar(&costs, 0.95),
                cvar80: empirical_cvar(&costs, 0.80),
                time_mean,
                time_se,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Histogram of each method's successful costs on a range shared across
/// methods, so the per-method plots are directly comparable.
pub fn cost_histograms(
    methods: &[Method],
    records: &[ReplicationRecord],
    bins: usize,
) -> Vec<(Method, Vec<HistBin>)> {
    let all: Vec<f64> = records
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .map(|r| r.cost)
        .collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    methods
        .iter()
        .map(|&method| {
            let costs: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.status == RunStatus::Ok)
                .map(|r| r.cost)
                .collect();
            if all.is_empty() {
                return (method, Vec::new());
            }
            if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
                return (method, vec![HistBin { lo, hi, count: costs.len() }]);
            }
            let width = (hi - lo) / bins as f64;
            let mut out: Vec<HistBin> = (0..bins)
                .map(|b| HistBin {
                    lo: lo + b as f64 * width,
                    hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
                    count: 0,
                })
                .collect();
            for &c in &costs {
                let b = (((c - lo) / width) as usize).min(bins - 1);
                out[b].count += 1;
            }
            (method, out)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResults {
    pub records: Vec<ReplicationRecord>,
    pub metrics: Vec<MethodMetrics>,
    pub histograms: Vec<(Method, Vec<HistBin>)>,
}

/// Runs all replications (in parallel when `jobs > 1`) and aggregates.  The
/// outputs are deterministic functions of (config, master seed) apart from
/// the wall-time fields, regardless of `jobs`.
pub fn run_experiment(
    env: &Env,
    cfg: &ExperimentConfig,
    jobs: usize,
) -> Result<ExperimentResults, HarnessError> {
    cfg.validate()?;
    let absorbing: Vec<bool> =
        (0..env.model.n_states).map(|s| env.model.is_absorbing_zero_cost(s)).collect();
    let t_max = truncation_horizon(env.model.c_max(), env.model.discount, cfg.eta);
    let reps: Vec<usize> = (0..cfg.replications).collect();
    let per_rep: Vec<Vec<ReplicationRecord>> = if jobs <= 1 {
        reps.iter().map(|&r| run_replication_inner(env, cfg, &absorbing, t_max, r)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        pool.install(|| {
            reps.par_iter()
                .map(|&r| run_replication_inner(env, cfg, &absorbing, t_max, r))
                .collect()
        })
    };
    let records: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
    let metrics = summarize(&cfg.methods, &records);
    let histograms = cost_histograms(&cfg.methods, &records, HISTOGRAM_BINS);
    Ok(ExperimentResults { records, metrics, histograms })
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

/// Writes `metrics.csv`, `replications.csv`, and one `hist_<method>.csv` per
/// method into `out_dir` (created if missing).
pub fn write_experiment_outputs(
    out_dir: &Path,
    results: &ExperimentResults,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;

    let mut metrics = String::from("method,mean,se,cvar95,cvar80,time_mean,time_se\n");
    for m in &results.metrics {
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.method, m.mean, m.se, m.cvar95, m.cvar80, m.time_mean, m.time_se
        ));
    }
    write_atomic(&out_dir.join("metrics.csv"), &metrics)?;

    let mut reps = String::from("rep,method,seed,status,cost,plan_time_s,episode_len\n");
    for r in &results.records {
        reps.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.rep, r.method, r.seed, r.status, r.cost, r.plan_time_s, r.episode_len
        ));
    }
    write_atomic(&out_dir.join("replications.csv"), &reps)?;

    for (method, bins) in &results.histograms {
        let mut hist = String::from("bin_lo,bin_hi,count\n");
        for b in bins {
            hist.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
        }
        write_atomic(&out_dir.join(format!("hist_{method}.csv")), &hist)?;
    }
    Ok(())
}

/// Writes one `trace_<rep>.csv`.
pub fn write_trace(out_dir: &Path, rep: usize, steps: &[TraceStep]) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut text = String::from("t,state,action,xi,stage_cost\n");
    for s in steps {
        text.push_str(&format!("{},{},{},{},{}\n", s.t, s.state, s.action, s.xi, s.stage_cost));
    }
    write_atomic(&out_dir.join(format!("trace_{rep}.csv")), &text)
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Simulates `episodes` episodes of a planned policy on the true system
/// (the CLI's `evaluate` subcommand), returning per-episode records and
/// optionally capturing traces.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    env: &Env,
    result: &AbdcpResult,
    risk: RiskSpec,
    mu1: &Belief,
    episodes: usize,
    eta: f64,
    master_seed: u64,
    mut traces: Option<&mut Vec<Vec<TraceStep>>>,
) -> Result<Vec<ReplicationRecord>, HarnessError> {
    let absorbing: Vec<bool> =
        (0..env.model.n_states).map(|s| env.model.is_absorbing_zero_cost(s)).collect();
    let t_max = truncation_horizon(env.model.c_max(), env.model.discount, eta);
    let method = match risk {
        RiskSpec::Expectation => Method::AbdcpExp,
        RiskSpec::Cvar { alpha } => Method::AbdcpCvar { alpha },
    };
    let mut records = Vec::with_capacity(episodes);
    for rep in 0..episodes {
        let seed = derive_seed(master_seed, &[rep as u64, 1]);
        let actor = Actor::Belief {
            values: &result.values,
            result,
            risk,
            mu: mu1.clone(),
        };
        let mut trace_buf = traces.as_ref().map(|_| Vec::new());
        let outcome = simulate_episode(
            &env.model,
            env.true_theta,
            &absorbing,
            actor,
            env.start_state,
            t_max,
            seed,
            trace_buf.as_mut(),
        )
        .map_err(HarnessError::InvalidConfig)?;
        if let (Some(out), Some(buf)) = (traces.as_mut(), trace_buf) {
            out.push(buf);
        }
        records.push(ReplicationRecord {
            rep,
            method,
            seed,
            status: RunStatus::Ok,
            cost: outcome.cost,
            plan_time_s: 0.0,
            episode_len: outcome.steps,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::value_iteration_under_theta;
    use rand::Rng;

    fn corridor_env() -> Env {
        let cfg = PathPlanningConfig {
            width: 3,
            height: 1,
            map: vec![vec![0, 0, 0]],
            start: [0, 0],
            goal: [2, 0],
            true_rates: [1.0, 1.0, 1.0, 1.0],
            true_accident: [0.3, 0.0, 0.0, 0.0],
            rate_grids: [vec![0.5, 1.0], vec![1.0], vec![1.0], vec![1.0]],
            accident_grids: [vec![0.1, 0.3], vec![0.0], vec![0.0], vec![0.0]],
            accident_delay: 10.0,
            bins: 2,
            discount: 0.9,
        };
        build_pathplanning(&cfg).unwrap()
    }

    fn corridor_experiment(methods: Vec<Method>) -> (Env, ExperimentConfig) {
        let env = corridor_env();
        let cfg = ExperimentConfig {
            environment: EnvironmentRef::Path("unused.json".into()),
            methods,
            dataset_size: 6,
            replications: 4,
            master_seed: 20240817,
            eta: 1e-3,
            epsilon: 0.1,
            n_new: 4,
            max_outer: 20,
            ccp_tol: 1e-6,
            fp_tol: 1e-9,
            out_dir: None,
        };
        (env, cfg)
    }

    #[test]
    fn method_strings_roundtrip() {
        let cases = [
            ("abdcp-exp", Method::AbdcpExp),
            ("abdcp-cvar(0.95)", Method::AbdcpCvar { alpha: 0.95 }),
            ("drmdp", Method::Drmdp),
            ("nominal", Method::Nominal),
        ];
        for (text, want) in cases {
            let got: Method = text.parse().unwrap();
            assert_eq!(got, want);
            assert_eq!(got.to_string(), text);
        }
        assert!("abdcp".parse::<Method>().is_err());
        assert!("abdcp-cvar(1.5)".parse::<Method>().is_err());
        assert!("abdcp-cvar(".parse::<Method>().is_err());
    }

    #[test]
    fn truncation_horizon_closed_form() {
        // γᵗ·C_max/(1−γ) ≤ η first at t = ⌈ln(η(1−γ)/C_max)/ln γ⌉.
        let t = truncation_horizon(10.0, 0.95, 1e-3);
        assert_eq!(t, 238);
        // The bound really crosses at that step and not before.
        let tail = |t: i32| 0.95f64.powi(t) * 10.0 / 0.05;
        assert!(tail(238) <= 1e-3);
        assert!(tail(237) > 1e-3);
        assert_eq!(truncation_horizon(0.0, 0.9, 1e-3), 0);
        assert_eq!(truncation_horizon(1.0, 0.0, 1e-3), 1);
        assert_eq!(truncation_horizon(1e-6, 0.9, 1e-3), 0);
    }

    #[test]
    fn empirical_cvar_averages_top_tail() {
        let costs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((empirical_cvar(&costs, 0.8) - 90.5).abs() < 1e-12);
        assert!((empirical_cvar(&costs, 0.95) - 98.0).abs() < 1e-12);
        // A single replication puts every column at that cost.
        assert_eq!(empirical_cvar(&[7.25], 0.95), 7.25);
        assert_eq!(empirical_cvar(&[7.25], 0.8), 7.25);
        // Order-independent; ⌈0.5·3⌉ = 2 top costs.
        let mut shuffled = vec![3.0, 1.0, 2.0];
        assert_eq!(empirical_cvar(&shuffled, 0.5), 2.5);
        shuffled.reverse();
        assert_eq!(empirical_cvar(&shuffled, 0.5), 2.5);
    }

    #[test]
    fn empirical_cvar_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = rng.gen_range(1..40);
            let costs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..50.0)).collect();
            let mean = costs.iter().sum::<f64>() / k as f64;
            let c80 = empirical_cvar(&costs, 0.8);
            let c95 = empirical_cvar(&costs, 0.95);
            assert!(c95 >= c80 - 1e-12);
            assert!(c80 >= mean - 1e-12);
        }
    }

    #[test]
    fn config_defaults_fill_in() {
        let json = r#"{
            "environment": "env.json",
            "methods": ["abdcp-exp", "abdcp-cvar(0.95)"],
            "dataset_size": 10,
            "replications": 3,
            "master_seed": 7
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.eta, 1e-3);
        assert_eq!(cfg.epsilon, 0.1);
        assert_eq!(cfg.n_new, 10);
        assert_eq!(cfg.methods[1], Method::AbdcpCvar { alpha: 0.95 });
        assert!(matches!(cfg.environment, EnvironmentRef::Path(_)));

        let bad = json.replace("abdcp-exp", "gradient-descent");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn replication_is_deterministic_modulo_wall_time() {
        let (env, cfg) = corridor_experiment(vec![
            Method::AbdcpExp,
            Method::AbdcpCvar { alpha: 0.95 },
            Method::Drmdp,
            Method::Nominal,
        ]);
        let a = run_replication(&env, &cfg, 2);
        let b = run_replication(&env, &cfg, 2);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rep, y.rep);
            assert_eq!(x.method, y.method);
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.status, y.status);
            assert!(x.cost == y.cost || (x.cost.is_nan() && y.cost.is_nan()));
            assert_eq!(x.episode_len, y.episode_len);
            assert_eq!(x.status, RunStatus::Ok);
            assert!(x.cost.is_finite() && x.cost >= 0.0);
        }
    }

    #[test]
    fn jobs_do_not_change_results() {
        let (env, cfg) = corridor_experiment(vec![Method::AbdcpExp, Method::Nominal]);
        let serial = run_experiment(&env, &cfg, 1).unwrap();
        let parallel = run_experiment(&env, &cfg, 3).unwrap();
        assert_eq!(serial.records.len(), parallel.records.len());
        for (x, y) in serial.records.iter().zip(&parallel.records) {
            assert_eq!((x.rep, x.method, x.seed), (y.rep, y.method, y.seed));
            assert_eq!(x.cost, y.cost);
            assert_eq!(x.episode_len, y.episode_len);
        }
        for (mx, my) in serial.metrics.iter().zip(&parallel.metrics) {
            assert_eq!(mx.mean, my.mean);
            assert_eq!(mx.cvar95, my.cvar95);
        }
    }

    #[test]
    fn corner_prior_nominal_matches_expectation_planner() {
        // With a point-mass prior both methods reduce to the fixed-θ optimal
        // policy, so identical seeds give identical realized costs.
        let env = corridor_env();
        let model = &env.model;
        let truth = env.true_theta;
        let corner = Belief::corner(model.n_thetas(), truth);
        let opts = AbdcpOptions { epsilon: 0.1, n_new: 4, ..AbdcpOptions::default() };
        let result =
            abdcp(model, RiskSpec::Expectation, env.start_state, &corner, &opts).unwrap();
        let (_, vi_policy) = value_iteration_under_theta(model, truth, 1e-10).unwrap();
        let absorbing: Vec<bool> =
            (0..model.n_states).map(|s| model.is_absorbing_zero_cost(s)).collect();
        let t_max = truncation_horizon(model.c_max(), model.discount, 1e-3);
        for seed in [3u64, 17, 40] {
            let br = simulate_episode(
                model,
                truth,
                &absorbing,
                Actor::Belief {
                    values: &result.values,
                    result: &result,
                    risk: RiskSpec::Expectation,
                    mu: corner.clone(),
                },
                env.start_state,
                t_max,
                seed,
                None,
            )
            .unwrap();
            let fixed = simulate_episode(
                model,
                truth,
                &absorbing,
                Actor::Fixed(&vi_policy),
                env.start_state,
                t_max,
                seed,
                None,
            )
            .unwrap();
            assert!(
                (br.cost - fixed.cost).abs() < 1e-9,
                "seed {seed}: {} vs {}",
                br.cost,
                fixed.cost
            );
            assert_eq!(br.steps, fixed.steps);
        }
    }

    #[test]
    fn failed_methods_keep_the_replication_alive() {
        // dataset_size 0 makes the nominal baseline fail (no data for an
        // MLE) while the Bayesian methods run from the uniform prior.
        let (env, mut cfg) = corridor_experiment(vec![Method::Nominal, Method::AbdcpExp]);
        cfg.dataset_size = 0;
        cfg.replications = 1;
        let results = run_experiment(&env, &cfg, 1).unwrap();
        assert_eq!(results.records.len(), 2);
        assert_eq!(results.records[0].status, RunStatus::Failed);
        assert!(results.records[0].cost.is_nan());
        assert_eq!(results.records[1].status, RunStatus::Ok);
        // Metrics skip the failed cells.
        assert!(results.metrics[0].mean.is_nan());
        assert!(results.metrics[1].mean.is_finite());
    }

    #[test]
    fn histograms_share_the_range_across_methods() {
        let methods = [Method::AbdcpExp, Method::Nominal];
        let record = |method, cost| ReplicationRecord {
            rep: 0,
            method,
            seed: 0,
            status: RunStatus::Ok,
            cost,
            plan_time_s: 0.0,
            episode_len: 1,
        };
        let records = vec![
            record(Method::AbdcpExp, 1.0),
            record(Method::AbdcpExp, 2.0),
            record(Method::Nominal, 9.0),
        ];
        let hists = cost_histograms(&methods, &records, 4);
        for (_, bins) in &hists {
            assert_eq!(bins.len(), 4);
            assert_eq!(bins.first().unwrap().lo, 1.0);
            assert_eq!(bins.last().unwrap().hi, 9.0);
        }
        let total: usize =
            hists.iter().map(|(_, bins)| bins.iter().map(|b| b.count).sum::<usize>()).sum();
        assert_eq!(total, 3);

        // Degenerate spread collapses to a single bin.
        let records = vec![record(Method::AbdcpExp, 5.0), record(Method::AbdcpExp, 5.0)];
        let hists = cost_histograms(&methods[..1], &records, 4);
        assert_eq!(hists[0].1.len(), 1);
        assert_eq!(hists[0].1[0].count, 2);
    }

    #[test]
    fn outputs_are_written_and_parse_back() {
        let (env, mut cfg) = corridor_experiment(vec![Method::AbdcpExp, Method::Nominal]);
        cfg.replications = 2;
        let results = run_experiment(&env, &cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_experiment_outputs(dir.path(), &results).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("method,mean,se,cvar95,cvar80,time_mean,time_se\n"));
        assert_eq!(metrics.lines().count(), 3);
        let reps = std::fs::read_to_string(dir.path().join("replications.csv")).unwrap();
        assert_eq!(reps.lines().count(), 5);
        assert!(dir.path().join("hist_abdcp-exp.csv").exists());
        assert!(dir.path().join("hist_nominal.csv").exists());
    }

    #[test]
    fn summary_statistics_match_hand_computation() {
        let record = |rep, cost, time| ReplicationRecord {
            rep,
            method: Method::Nominal,
            seed: 0,
            status: RunStatus::Ok,
            cost,
            plan_time_s: time,
            episode_len: 1,
        };
        let records = vec![record(0, 2.0, 0.5), record(1, 4.0, 0.7), record(2, 6.0, 0.6)];
        let metrics = summarize(&[Method::Nominal], &records);
        let m = &metrics[0];
        assert!((m.mean - 4.0).abs() < 1e-12);
        // Sample variance 4 → se = 2/√3.
        assert!((m.se - 2.0 / 3f64.sqrt()).abs() < 1e-12);
        // k=3: both CVaR levels average the single largest cost.
        assert_eq!(m.cvar95, 6.0);
        assert_eq!(m.cvar80, 6.0);
        assert!((m.time_mean - 0.6).abs() < 1e-12);
    }
}
