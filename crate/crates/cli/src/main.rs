//! `brmdp` — plan, evaluate, and replicate BR-MDP experiments.

use anyhow::{bail, Context, Result};
use brmdp::envs::{posterior_from_data, sample_dataset};
use brmdp::harness::{
    build_environment, evaluate_policy, load_experiment_config, resolve_environment_config,
    run_experiment, summarize, write_experiment_outputs, write_trace, EnvironmentConfig,
    ExperimentResults, Method, TraceStep,
};
use brmdp::lp::{dump_mps, solve_lp};
use brmdp::planner::abdcp;
use brmdp::reference::exact_value;
use brmdp::risk::{rho_subgradient_check, RiskSpec};
use brmdp::synth::{random_belief, random_feasible_lp, random_small_model};
use brmdp::util::derive_seed;
use brmdp::{AbdcpResult, Belief, ExperimentConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "brmdp",
    version,
    about = "Bayesian-risk MDP solver and experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's method list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run ABDCP once on replication 0's dataset and dump the planning
    /// artifact (bounds, gap history, controller) as JSON.
    Plan(CommonRunArgs),
    /// Simulate episodes of a planning artifact on the true system.
    Evaluate {
        /// Artifact written by `plan`.
        artifact: PathBuf,
        /// Master seed for the episode streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Number of episodes.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Also write one trace_<rep>.csv per episode.
        #[arg(long)]
        trace: bool,
    },
    /// Run the full replication experiment from an experiment config.
    Replicate {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Worker threads for replications.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Randomized cross-checks of the solvers against the exact oracles.
    OracleCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate, solve, and dump a random LP in MPS form (debugging).
    LpDump {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Everything `evaluate` needs to re-simulate a planned policy.
#[derive(Serialize, Deserialize)]
struct PlanArtifact {
    environment: EnvironmentConfig,
    method: Method,
    /// Posterior the plan started from.
    mu1: Vec<f64>,
    /// Episode-truncation level.
    eta: f64,
    result: AbdcpResult,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Plan(args) => plan(args),
        Command::Evaluate { artifact, seed, out, episodes, trace } => {
            evaluate(&artifact, seed, &out, episodes, trace)
        }
        Command::Replicate { common, jobs } => replicate(common, jobs),
        Command::OracleCheck { seed } => oracle_check(seed),
        Command::LpDump { seed, out } => lp_dump(seed, out.as_deref()),
    }
}

fn load_config(args: &CommonRunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = load_experiment_config(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(methods) = &args.methods {
        cfg.methods = methods.clone();
    }
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((cfg, base))
}

fn out_dir(args: &CommonRunArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn plan(args: CommonRunArgs) -> Result<()> {
    let (cfg, base) = load_config(&args)?;
    let env_cfg = resolve_environment_config(&cfg, &base)?;
    let env = build_environment(&env_cfg)?;
    let method = cfg
        .methods
        .iter()
        .copied()
        .find(|m| matches!(m, Method::AbdcpExp | Method::AbdcpCvar { .. }))
        .context("plan needs an abdcp-exp or abdcp-cvar(α) method in the list")?;
    let risk = match method {
        Method::AbdcpCvar { alpha } => RiskSpec::Cvar { alpha },
        _ => RiskSpec::Expectation,
    };

    let dataset = sample_dataset(&env, cfg.dataset_size, derive_seed(cfg.master_seed, &[0, 0]));
    let mu1 = posterior_from_data(&env.model, &dataset)?;
    let result = abdcp(&env.model, risk, env.start_state, &mu1, &cfg.abdcp_options())?;

    println!(
        "{method}: V in [{:.6}, {:.6}], gap {:.2e}, {} outer iteration(s), {:.2}s ({:?})",
        result.lower,
        result.upper,
        result.gap,
        result.outer_iterations,
        result.wall_time_s,
        result.stop_reason
    );

    let dir = out_dir(&args, &cfg);
    std::fs::create_dir_all(&dir)?;
    let artifact = PlanArtifact {
        environment: env_cfg,
        method,
        mu1: mu1.probs().to_vec(),
        eta: cfg.eta,
        result,
    };
    let path = dir.join(format!("plan_{method}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&artifact)?)?;
    println!("artifact written to {}", path.display());
    Ok(())
}

fn evaluate(artifact: &Path, seed: u64, out: &Path, episodes: usize, trace: bool) -> Result<()> {
    let text = std::fs::read_to_string(artifact)
        .with_context(|| format!("reading {}", artifact.display()))?;
    let artifact: PlanArtifact = serde_json::from_str(&text)?;
    let env = build_environment(&artifact.environment)?;
    let risk = match artifact.method {
        Method::AbdcpCvar { alpha } => RiskSpec::Cvar { alpha },
        _ => RiskSpec::Expectation,
    };
    let mu1 = Belief::new(artifact.mu1.clone())?;

    let mut traces: Vec<Vec<TraceStep>> = Vec::new();
    let records = evaluate_policy(
        &env,
        &artifact.result,
        risk,
        &mu1,
        episodes,
        artifact.eta,
        seed,
        trace.then_some(&mut traces),
    )?;
    let metrics = summarize(&[artifact.method], &records);
    let results = ExperimentResults { records, metrics, histograms: Vec::new() };
    write_experiment_outputs(out, &results)?;
    if trace {
        for (rep, steps) in traces.iter().enumerate() {
            write_trace(out, rep, steps)?;
        }
    }
    let m = &results.metrics[0];
    println!(
        "{}: mean {:.4} (se {:.4}), cvar95 {:.4}, cvar80 {:.4} over {episodes} episode(s)",
        m.method, m.mean, m.se, m.cvar95, m.cvar80
    );
    println!("outputs written to {}", out.display());
    Ok(())
}

fn replicate(args: CommonRunArgs, jobs: usize) -> Result<()> {
    let (cfg, base) = load_config(&args)?;
    let env = brmdp::harness::resolve_environment(&cfg, &base)?;
    let results = run_experiment(&env, &cfg, jobs)?;
    let dir = out_dir(&args, &cfg);
    write_experiment_outputs(&dir, &results)?;

    println!(
        "{:<18} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "method", "mean", "se", "cvar95", "cvar80", "time_mean"
    );
    for m in &results.metrics {
        println!(
            "{:<18} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            m.method.to_string(),
            m.mean,
            m.se,
            m.cvar95,
            m.cvar80,
            m.time_mean
        );
    }
    let failed = results
        .records
        .iter()
        .filter(|r| r.status == brmdp::harness::RunStatus::Failed)
        .count();
    if failed > 0 {
        println!("{failed} method run(s) failed; see replications.csv");
    }
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn check(name: &str, pass: bool, failures: &mut usize) {
    println!("oracle-check {name}: {}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        *failures += 1;
    }
}

fn oracle_check(seed: u64) -> Result<()> {
    let mut failures = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // LP solver vs exhaustive basic-feasible-solution enumeration.
    let mut lp_ok = true;
    for _ in 0..40 {
        let lp = random_feasible_lp(&mut rng, 5, 8);
        let got = solve_lp(&lp)?;
        let want = brmdp::lp::brute_force_reference(&lp)?;
        lp_ok &= (got.objective - want.objective).abs() <= 1e-6;
    }
    check("lp-vs-brute-force", lp_ok, &mut failures);

    // CVaR subgradients match central differences away from kinks.
    let mut risk_ok = true;
    for i in 0..200 {
        let n = 2 + (i % 3);
        let mu = random_belief(&mut rng, n);
        let z: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
        let alpha = rand::Rng::gen_range(&mut rng, 0.0..0.97);
        let report = rho_subgradient_check(RiskSpec::Cvar { alpha }, &z, &mu, 1e-5)?;
        risk_ok &= report.max_deviation <= 1e-7;
    }
    check("cvar-subgradients", risk_ok, &mut failures);

    // ABDCP bounds sandwich the exact finite-horizon oracle value.
    let mut sandwich_ok = true;
    for i in 0..10 {
        let model = random_small_model(&mut rng, 3, 3, 3, 0.9);
        let mu1 = random_belief(&mut rng, model.n_thetas());
        let risk = if i % 2 == 0 { RiskSpec::Expectation } else { RiskSpec::Cvar { alpha: 0.8 } };
        let opts = brmdp::AbdcpOptions { epsilon: 0.05, n_new: 5, ..Default::default() };
        let result = abdcp(&model, risk, 0, &mu1, &opts)?;
        let horizon = 40;
        let oracle = exact_value(&model, risk, 0, &mu1, horizon)?;
        let delta = oracle.truncation_bound + 1e-6;
        let ok = result.lower <= oracle.value + delta && oracle.value <= result.upper + delta;
        eprintln!(
            "DEBUG i={} risk={:?} n_s={} n_th={} n_xi={} lower={:.9} upper={:.9} oracle={:.9} bound={:.6} stop={:?} outer={} ok={}",
            i,
            risk,
            model.n_states,
            model.n_thetas(),
            model.n_xi(),
            result.lower,
            result.upper,
            oracle.value,
            oracle.truncation_bound,
            result.stop_reason,
            result.outer_iterations,
            ok
        );
        if !ok {
            let dump = serde_json::json!({ "model": &model, "mu1": mu1.probs(), "risk_cvar": !matches!(risk, RiskSpec::Expectation) });
            std::fs::write("/tmp/bad_instance.json", serde_json::to_string_pretty(&dump)?)?;
        }
        sandwich_ok &= ok;
    }
    check("bound-sandwich", sandwich_ok, &mut failures);

    // Corner beliefs collapse the planner to fixed-θ value iteration.
    let mut corner_ok = true;
    for _ in 0..6 {
        let model = random_small_model(&mut rng, 3, 3, 3, 0.9);
        let theta = rand::Rng::gen_range(&mut rng, 0..model.n_thetas());
        let corner = Belief::corner(model.n_thetas(), theta);
        let opts = brmdp::AbdcpOptions { epsilon: 0.01, n_new: 3, ..Default::default() };
        let result = abdcp(&model, RiskSpec::Cvar { alpha: 0.9 }, 0, &corner, &opts)?;
        let (vi, _) = brmdp::reference::value_iteration_under_theta(&model, theta, 1e-10)?;
        corner_ok &= (result.lower - vi[0]).abs() <= 1e-5 || result.lower <= vi[0] + 1e-5;
    }
    check("corner-collapse", corner_ok, &mut failures);

    if failures > 0 {
        bail!("{failures} oracle check(s) failed");
    }
    Ok(())
}

fn lp_dump(seed: u64, out: Option<&Path>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lp = random_feasible_lp(&mut rng, 6, 8);
    let listing = dump_mps(&lp, &format!("RAND{seed}"));
    let solution = solve_lp(&lp)?;
    println!("status {:?}, objective {:.9}", solution.status, solution.objective);
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("lp_{seed}.mps"));
            std::fs::write(&path, listing)?;
            println!("dump written to {}", path.display());
        }
        None => print!("{listing}"),
    }
    Ok(())
}
