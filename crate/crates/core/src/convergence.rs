//! δ_K assembly, ladder studies, and empirical rate fits.
//!
//! The composite convergence parameter
//! `δ_K = E_N² + (E_N')² + 1/min_l|C_l|` combines the graphon sampling error,
//! the mean-profile sampling error, and the within-cluster averaging error. A
//! ladder study sweeps `(N, cluster size)` upward, measures the gap
//! statistics at every rung, and fits log-log slopes of the gaps against δ_K.
//! The theory puts the squared field and state gaps at `O(δ_K)` and the
//! absolute-square/cost gaps at `O(δ_K^{1/2})`; constants are unknown, so the
//! fits are rate-shape checks with wide bands, not value checks.

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::graphon::{mean_l1_error, sectional_l1_error, Graphon, Kernel, MeanProfile, MuProfile};
use crate::grid::{PartitionGrid, TimeGrid};
use crate::limit::{solve_limit, ModelParams};
use crate::popsim::{
    estimate_epsilon_from, gap_statistics, simulate_closed_loop, DeviationStrategy, EpsilonReport,
    GapReport, PathBundle, PopulationConfig, SimOptions,
};

/// `δ_K = E_N² + (E_N')² + 1/min_l|C_l|`.
pub fn delta_k(e_n: f64, e_n_prime: f64, min_cluster: usize) -> f64 {
    assert!(min_cluster >= 1, "cluster sizes are positive");
    e_n * e_n + e_n_prime * e_n_prime + 1.0 / min_cluster as f64
}

/// Scenario data shared by all rungs of a ladder.
#[derive(Debug, Clone)]
pub struct LadderScenario {
    pub params: ModelParams,
    pub kernel: Kernel,
    /// Truncation rank for infinite-rank kernels.
    pub truncation: Option<usize>,
    /// Mean profile; must not be per-node (the node count varies along the
    /// ladder).
    pub mu: MuProfile,
    /// Initial variance per node (uniform across nodes).
    pub init_variance: f64,
    pub steps: usize,
    pub points_per_cell: usize,
    pub deviations: Vec<DeviationStrategy>,
}

/// Everything measured at one (N, cluster size) rung.
#[derive(Debug, Clone, Serialize)]
pub struct LadderPointReport {
    pub n: usize,
    pub min_cluster: usize,
    pub e_n: f64,
    pub e_n_prime: f64,
    pub delta_k: f64,
    /// Present unless the rung was infeasible.
    pub gaps: Option<GapReport>,
    pub epsilon: Option<EpsilonReport>,
    /// Blow-up diagnostics when the decoupling assumption failed.
    pub infeasible: Option<String>,
}

/// A fitted log-log slope of one gap metric against δ_K.
#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub metric: String,
    /// None when fewer than two feasible positive samples exist.
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub points: Vec<LadderPointReport>,
    pub slopes: Vec<SlopeFit>,
    pub paths: usize,
    pub seed: u64,
}

impl ConvergenceReport {
    pub fn slope(&self, metric: &str) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.metric == metric)
            .and_then(|s| s.slope)
    }
}

/// Least-squares slope of `log y` against `log x` (positive samples only).
fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Runs the full ladder study: per rung, sample the graph, assemble δ_K,
/// solve the limit, simulate, and collect gaps and ε̂; finally fit slopes.
///
/// A rung whose mode Riccati blows up is marked infeasible and skipped, the
/// remaining rungs still run.
pub fn run_ladder(
    scenario: &LadderScenario,
    ladder: &[(usize, usize)],
    paths: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if ladder.is_empty() {
        return Err(CoreError::validation("ladder needs at least one point"));
    }
    for w in ladder.windows(2) {
        if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
            return Err(CoreError::validation(
                "ladder must increase strictly in both N and cluster size",
            ));
        }
    }
    if matches!(scenario.mu, MuProfile::PerNode { .. }) {
        return Err(CoreError::validation(
            "ladder scenarios need a resolution-independent mean profile",
        ));
    }
    scenario.params.validate()?;

    let kernel_graphon = Graphon::Analytic(scenario.kernel);
    let grid = TimeGrid::new(scenario.params.t_horizon, scenario.steps)?;

    let mut points = Vec::with_capacity(ladder.len());
    for &(n, cluster) in ladder {
        let step = kernel_graphon.sample_step(n)?;
        let e_n = sectional_l1_error(&kernel_graphon, &step, scenario.points_per_cell)?;
        let mu = MeanProfile::project(scenario.mu.clone(), n)?;
        let e_n_prime = mean_l1_error(&mu, scenario.points_per_cell)?;
        let dk = delta_k(e_n, e_n_prime, cluster);

        let pgrid = PartitionGrid::new(n, scenario.points_per_cell)?;
        let basis = crate::spectral::analytic_eigenpairs(
            &scenario.kernel,
            scenario.truncation,
            &mu,
            &pgrid,
        )?;
        let sol = match solve_limit(&scenario.params, &basis, &grid) {
            Ok(sol) => sol,
            Err(CoreError::AssumptionViolated(msg)) => {
                points.push(LadderPointReport {
                    n,
                    min_cluster: cluster,
                    e_n,
                    e_n_prime,
                    delta_k: dk,
                    gaps: None,
                    epsilon: None,
                    infeasible: Some(msg),
                });
                continue;
            }
            Err(e) => return Err(e),
        };

        let cfg = PopulationConfig {
            n_nodes: n,
            cluster_sizes: vec![cluster; n],
            mu,
            init_variance: vec![scenario.init_variance; n],
            adjacency: step.as_step().expect("sampled step").matrix().to_vec(),
            seed,
            paths,
        };
        let bundle = PathBundle::new(&cfg, &grid);
        let out = simulate_closed_loop(&cfg, &sol, &bundle, &SimOptions::default())?;
        let gaps = gap_statistics(&out);
        let epsilon = if scenario.deviations.is_empty() {
            None
        } else {
            Some(estimate_epsilon_from(
                &out,
                &cfg,
                &sol,
                &bundle,
                &scenario.deviations,
                Some(dk),
            )?)
        };
        points.push(LadderPointReport {
            n,
            min_cluster: cluster,
            e_n,
            e_n_prime,
            delta_k: dk,
            gaps: Some(gaps),
            epsilon,
            infeasible: None,
        });
    }

    let feasible: Vec<&LadderPointReport> = points.iter().filter(|p| p.gaps.is_some()).collect();
    let dks: Vec<f64> = feasible.iter().map(|p| p.delta_k).collect();
    let extract = |f: &dyn Fn(&GapReport) -> f64| -> Vec<f64> {
        feasible
            .iter()
            .map(|p| f(p.gaps.as_ref().unwrap()))
            .collect()
    };
    let slopes = vec![
        SlopeFit {
            metric: "z_gap_sq".into(),
            slope: loglog_slope(&dks, &extract(&|g| g.z_gap_sq.value)),
        },
        SlopeFit {
            metric: "z_abs_sq_gap".into(),
            slope: loglog_slope(&dks, &extract(&|g| g.z_abs_sq_gap.value)),
        },
        SlopeFit {
            metric: "x_gap_sq".into(),
            slope: loglog_slope(&dks, &extract(&|g| g.x_gap_sq.value)),
        },
        SlopeFit {
            metric: "x_abs_sq_gap".into(),
            slope: loglog_slope(&dks, &extract(&|g| g.x_abs_sq_gap.value)),
        },
        SlopeFit {
            metric: "cost_gap".into(),
            slope: loglog_slope(&dks, &extract(&|g| g.cost_gap.mean)),
        },
        SlopeFit {
            metric: "epsilon_hat".into(),
            slope: loglog_slope(
                &dks,
                &feasible
                    .iter()
                    .map(|p| p.epsilon.as_ref().map_or(0.0, |e| e.epsilon_hat))
                    .collect::<Vec<f64>>(),
            ),
        },
    ];

    Ok(ConvergenceReport {
        points,
        slopes,
        paths,
        seed,
    })
}
