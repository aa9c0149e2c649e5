//! JSON and CSV emission with a versioned schema.
//!
//! Every file carries the schema marker: JSON documents hold a
//! `schema_version` field, CSV files start with a `# gmfg-<kind> v1` comment
//! line. Nothing here writes timestamps or machine identifiers, so re-running
//! a command with the same scenario and seed produces byte-identical files.

use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::path::Path;

use crate::convergence::ConvergenceReport;
use crate::error::Result;
use crate::limit::{LimitSolution, ModePathSet};
use crate::popsim::{EpsilonReport, GapReport, SimOutput};

pub const SCHEMA_VERSION: u32 = 1;

fn fmt_f64(v: f64) -> String {
    // shortest round-trip formatting; stable across runs
    format!("{v}")
}

/// Serializes a report under a top-level `schema_version`.
pub fn json_doc<T: Serialize>(kind: &str, value: &T) -> String {
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "data": value,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
    text.push('\n');
    text
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// The limit solution as JSON: grids, coefficient arrays, and the basis.
pub fn limit_solution_json(sol: &LimitSolution) -> String {
    json_doc("limit_solution", sol)
}

/// Mode SDE paths as CSV with columns `path,t,l,z_l,g_l`.
pub fn mode_paths_csv(sol: &LimitSolution, mps: &ModePathSet) -> String {
    let mut out = String::from("# gmfg-mode-paths v1\npath,t,l,z_l,g_l\n");
    for path in 0..mps.n_paths() {
        for (l, _) in sol.modes.iter().enumerate() {
            for k in 0..sol.grid.n_nodes() {
                let z = mps.states[path][l][k];
                let g = mps.g_value(sol, path, l, k);
                writeln!(
                    out,
                    "{path},{},{},{},{}",
                    fmt_f64(sol.grid.node(k)),
                    l + 1,
                    fmt_f64(z),
                    fmt_f64(g)
                )
                .expect("string write");
            }
        }
    }
    out
}

/// Cluster fields of the exported paths: `run_id,path,node,t,z_oq,z_bar_q`.
pub fn cluster_fields_csv(run_id: &str, out_sim: &SimOutput) -> String {
    let mut out = String::from("# gmfg-cluster-fields v1\nrun_id,path,node,t,z_oq,z_bar_q\n");
    for e in &out_sim.export {
        for q in 0..out_sim.n_nodes {
            for k in 0..out_sim.grid.n_nodes() {
                writeln!(
                    out,
                    "{run_id},{},{},{},{},{}",
                    e.path,
                    q + 1,
                    fmt_f64(out_sim.grid.node(k)),
                    fmt_f64(e.z_oq[q][k]),
                    fmt_f64(e.z_bar[q][k])
                )
                .expect("string write");
            }
        }
    }
    out
}

/// Per-agent realized costs: `run_id,agent,j_hat,stderr`.
pub fn agent_costs_csv(run_id: &str, out_sim: &SimOutput) -> String {
    let mut out = String::from("# gmfg-agent-costs v1\nrun_id,agent,j_hat,stderr\n");
    for (i, stat) in out_sim.agent_costs.iter().enumerate() {
        writeln!(
            out,
            "{run_id},{},{},{}",
            i + 1,
            fmt_f64(stat.mean),
            fmt_f64(stat.stderr)
        )
        .expect("string write");
    }
    out
}

/// Simulation summary: gap statistics, δ_K components, seeds, config echo.
#[derive(Serialize)]
pub struct SimulationSummary<'a> {
    pub run_id: &'a str,
    pub seed: u64,
    pub paths: usize,
    pub n_nodes: usize,
    pub total_agents: usize,
    pub e_n: f64,
    pub e_n_prime: f64,
    pub delta_k: f64,
    pub gaps: &'a GapReport,
    /// Filled by the deviate command; the plain simulation leaves it null.
    pub epsilon: Option<&'a EpsilonReport>,
    pub sampled_agents: &'a [usize],
    /// The resolved scenario TOML this run used.
    pub config: &'a str,
}

pub fn simulation_summary_json(summary: &SimulationSummary) -> String {
    json_doc("simulation_summary", summary)
}

/// ε report plus provenance.
#[derive(Serialize)]
pub struct EpsilonSummary<'a> {
    pub run_id: &'a str,
    pub seed: u64,
    pub paths: usize,
    pub delta_k: f64,
    pub report: &'a EpsilonReport,
    pub config: &'a str,
}

pub fn epsilon_summary_json(summary: &EpsilonSummary) -> String {
    json_doc("epsilon_report", summary)
}

#[derive(Serialize)]
pub struct ConvergenceSummary<'a> {
    pub run_id: &'a str,
    pub report: &'a ConvergenceReport,
    pub config: &'a str,
}

pub fn convergence_json(summary: &ConvergenceSummary) -> String {
    json_doc("convergence_report", summary)
}

/// Tidy long-format CSV of the ladder: one row per (rung, metric).
pub fn convergence_csv(run_id: &str, report: &ConvergenceReport) -> String {
    let mut out = String::from("# gmfg-convergence v1\nrun_id,n,min_cluster,metric,value,stderr\n");
    let mut push = |n: usize, c: usize, metric: &str, value: f64, stderr: f64| {
        writeln!(
            out,
            "{run_id},{n},{c},{metric},{},{}",
            fmt_f64(value),
            fmt_f64(stderr)
        )
        .expect("string write");
    };
    for p in &report.points {
        push(p.n, p.min_cluster, "e_n", p.e_n, 0.0);
        push(p.n, p.min_cluster, "e_n_prime", p.e_n_prime, 0.0);
        push(p.n, p.min_cluster, "delta_k", p.delta_k, 0.0);
        if let Some(g) = &p.gaps {
            push(
                p.n,
                p.min_cluster,
                "z_gap_sq",
                g.z_gap_sq.value,
                g.z_gap_sq.stderr,
            );
            push(
                p.n,
                p.min_cluster,
                "z_abs_sq_gap",
                g.z_abs_sq_gap.value,
                g.z_abs_sq_gap.stderr,
            );
            push(
                p.n,
                p.min_cluster,
                "x_gap_sq",
                g.x_gap_sq.value,
                g.x_gap_sq.stderr,
            );
            push(
                p.n,
                p.min_cluster,
                "x_abs_sq_gap",
                g.x_abs_sq_gap.value,
                g.x_abs_sq_gap.stderr,
            );
            push(
                p.n,
                p.min_cluster,
                "cost_gap",
                g.cost_gap.mean,
                g.cost_gap.stderr,
            );
        }
        if let Some(e) = &p.epsilon {
            push(p.n, p.min_cluster, "epsilon_hat", e.epsilon_hat, 0.0);
            push(
                p.n,
                p.min_cluster,
                "epsilon_upper95",
                e.epsilon_upper95,
                0.0,
            );
        }
    }
    out
}
