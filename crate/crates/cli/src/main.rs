//! `gmfg`: scenario-driven solver and Monte Carlo simulator for
//! linear-quadratic stochastic games on dense graphs (graphon mean field
//! games) with common noise.
//!
//! Subcommands:
//! - `solve-limit`: solve the limit game (Riccati, mode ODEs, offset) and
//!   write the solution JSON;
//! - `simulate`: run the finite-population closed loop and emit gap
//!   statistics plus plot-ready CSVs;
//! - `deviate`: estimate the empirical ε against the scenario's deviation
//!   library;
//! - `converge`: run a (N, cluster size) ladder study and fit decay slopes.
//!
//! Exit codes: 0 success, 1 configuration/validation, 2 model assumption
//! violated (mode Riccati blow-up), 3 numerical failure. Runs are
//! deterministic: the same scenario and seed produce byte-identical outputs.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use gmfg_core::convergence::run_ladder;
use gmfg_core::error::CoreError;
use gmfg_core::limit::{simulate_modes, solve_limit};
use gmfg_core::output as out;
use gmfg_core::popsim::{
    estimate_epsilon_from, gap_statistics, simulate_closed_loop, PathBundle, SimOptions,
};
use gmfg_core::scenario::Scenario;

#[derive(Parser)]
#[command(
    name = "gmfg",
    version,
    about = "Graphon mean field game solver and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the limit game and write the solution files.
    SolveLimit(RunArgs),
    /// Simulate the finite-population closed loop and the gap statistics.
    Simulate(RunArgs),
    /// Estimate the empirical ε against the scenario's deviation library.
    Deviate(RunArgs),
    /// Run the scenario's (N, cluster size) ladder and fit decay slopes.
    Converge(RunArgs),
}

#[derive(Parser)]
struct RunArgs {
    /// Scenario TOML file.
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Cap worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the scenario and GMFG_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reserves exit code 2 for usage errors; ours means an
            // assumption violation, so usage problems map to 1
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    let (name, args) = match &cli.command {
        Command::SolveLimit(a) => ("solve-limit", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Deviate(a) => ("deviate", a),
        Command::Converge(a) => ("converge", a),
    };
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CoreError::validation(format!("thread pool: {e}")))?;
    }

    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.population.seed = seed;
    }
    if let Some(paths) = args.paths {
        if paths == 0 {
            return Err(CoreError::validation("--paths must be positive"));
        }
        scenario.population.paths = paths;
    }
    let out_dir = resolve_out_dir(args, &scenario);
    std::fs::create_dir_all(&out_dir)?;
    let run_id = format!("{name}-seed{}", scenario.population.seed);

    // every command echoes the fully resolved config
    out::write_text(
        &out_dir.join("config_resolved.toml"),
        &scenario.resolved_toml(),
    )?;

    match cli.command {
        Command::SolveLimit(_) => cmd_solve_limit(&scenario, &out_dir),
        Command::Simulate(_) => cmd_simulate(&scenario, &out_dir, &run_id),
        Command::Deviate(_) => cmd_deviate(&scenario, &out_dir, &run_id),
        Command::Converge(_) => cmd_converge(&scenario, &out_dir, &run_id),
    }
}

fn resolve_out_dir(args: &RunArgs, scenario: &Scenario) -> PathBuf {
    if let Some(dir) = &args.out {
        return dir.clone();
    }
    if let Some(dir) = &scenario.outputs.dir {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var("GMFG_OUT") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("out")
}

fn cmd_solve_limit(scenario: &Scenario, out_dir: &Path) -> Result<(), CoreError> {
    let built = scenario.build()?;
    let sol = solve_limit(&scenario.model, &built.basis, &built.grid)?;
    out::write_text(
        &out_dir.join("limit_solution.json"),
        &out::limit_solution_json(&sol),
    )?;
    out::write_text(&out_dir.join("basis.json"), &built.basis.to_json())?;
    println!(
        "limit solution: {} modes, f(0) = {}, g_ring(0) = {}",
        sol.modes.len(),
        sol.f[0],
        sol.g_ring[0]
    );
    for (idx, rep) in sol.monotonicity.iter().enumerate() {
        match rep.branch {
            Some(branch) => println!(
                "mode {} (lambda = {}): monotonicity holds ({:?} branch, beta = {:.6})",
                idx + 1,
                rep.lambda,
                branch,
                rep.beta_margin
            ),
            None => println!(
                "mode {} (lambda = {}): monotonicity condition not satisfied (existence \
                 certified by the Riccati route only)",
                idx + 1,
                rep.lambda
            ),
        }
    }
    Ok(())
}

fn cmd_simulate(scenario: &Scenario, out_dir: &Path, run_id: &str) -> Result<(), CoreError> {
    let built = scenario.build()?;
    let sol = solve_limit(&scenario.model, &built.basis, &built.grid)?;
    let bundle = PathBundle::new(&built.cfg, &built.grid);
    let opts = SimOptions {
        sampled_agents: built.sample_agents.clone(),
        export_paths: scenario.outputs.export_paths.min(built.cfg.paths),
    };
    let sim = simulate_closed_loop(&built.cfg, &sol, &bundle, &opts)?;
    let gaps = gap_statistics(&sim);

    let config = scenario.resolved_toml();
    let summary = out::SimulationSummary {
        run_id,
        seed: built.cfg.seed,
        paths: built.cfg.paths,
        n_nodes: built.cfg.n_nodes,
        total_agents: built.cfg.total_agents(),
        e_n: built.e_n,
        e_n_prime: built.e_n_prime,
        delta_k: built.delta_k,
        gaps: &gaps,
        epsilon: None,
        sampled_agents: &sim.sampled_agents,
        config: &config,
    };
    out::write_text(
        &out_dir.join("summary.json"),
        &out::simulation_summary_json(&summary),
    )?;
    out::write_text(
        &out_dir.join("cluster_fields.csv"),
        &out::cluster_fields_csv(run_id, &sim),
    )?;
    out::write_text(
        &out_dir.join("agent_costs.csv"),
        &out::agent_costs_csv(run_id, &sim),
    )?;
    if scenario.outputs.write_mode_paths {
        let mps = simulate_modes(&sol, opts.export_paths.max(1), built.cfg.seed);
        out::write_text(
            &out_dir.join("mode_paths.csv"),
            &out::mode_paths_csv(&sol, &mps),
        )?;
    }
    println!(
        "simulated {} agents on {} nodes over {} paths: sup-gap |z_oq - z_bar|^2 = {} \
         (delta_K = {})",
        built.cfg.total_agents(),
        built.cfg.n_nodes,
        built.cfg.paths,
        gaps.z_gap_sq.value,
        built.delta_k
    );
    Ok(())
}

fn cmd_deviate(scenario: &Scenario, out_dir: &Path, run_id: &str) -> Result<(), CoreError> {
    let built = scenario.build()?;
    if built.deviations.is_empty() {
        return Err(CoreError::validation(
            "scenario has no [[deviations]] entries; nothing to test against",
        ));
    }
    let sol = solve_limit(&scenario.model, &built.basis, &built.grid)?;
    let bundle = PathBundle::new(&built.cfg, &built.grid);
    let opts = SimOptions {
        sampled_agents: built.sample_agents.clone(),
        export_paths: 0,
    };
    let base = simulate_closed_loop(&built.cfg, &sol, &bundle, &opts)?;
    let report = estimate_epsilon_from(
        &base,
        &built.cfg,
        &sol,
        &bundle,
        &built.deviations,
        Some(built.delta_k),
    )?;

    let config = scenario.resolved_toml();
    let summary = out::EpsilonSummary {
        run_id,
        seed: built.cfg.seed,
        paths: built.cfg.paths,
        delta_k: built.delta_k,
        report: &report,
        config: &config,
    };
    out::write_text(
        &out_dir.join("epsilon.json"),
        &out::epsilon_summary_json(&summary),
    )?;
    println!(
        "epsilon_hat = {} (one-sided 95% bound {}, delta_K^(1/2) = {})",
        report.epsilon_hat,
        report.epsilon_upper95,
        built.delta_k.sqrt()
    );
    for pair in &report.pairs {
        println!(
            "  agent {} vs {}: excess = {} +- {}",
            pair.agent + 1,
            pair.strategy,
            pair.mean_excess,
            pair.stderr
        );
    }
    Ok(())
}

fn cmd_converge(scenario: &Scenario, out_dir: &Path, run_id: &str) -> Result<(), CoreError> {
    let (ladder_scn, points) = scenario.ladder()?;
    let report = run_ladder(
        &ladder_scn,
        &points,
        scenario.population.paths,
        scenario.population.seed,
    )?;
    let config = scenario.resolved_toml();
    let summary = out::ConvergenceSummary {
        run_id,
        report: &report,
        config: &config,
    };
    out::write_text(
        &out_dir.join("convergence.json"),
        &out::convergence_json(&summary),
    )?;
    out::write_text(
        &out_dir.join("convergence.csv"),
        &out::convergence_csv(run_id, &report),
    )?;
    for p in &report.points {
        match (&p.gaps, &p.infeasible) {
            (Some(g), _) => println!(
                "ladder (N = {}, |C| = {}): delta_K = {}, sup-gap = {}, eps_hat = {}",
                p.n,
                p.min_cluster,
                p.delta_k,
                g.z_gap_sq.value,
                p.epsilon.as_ref().map_or(f64::NAN, |e| e.epsilon_hat)
            ),
            (None, Some(msg)) => {
                println!(
                    "ladder (N = {}, |C| = {}): infeasible ({msg})",
                    p.n, p.min_cluster
                )
            }
            _ => {}
        }
    }
    for s in &report.slopes {
        if let Some(slope) = s.slope {
            println!("slope[{}] = {slope:.3}", s.metric);
        }
    }
    Ok(())
}
