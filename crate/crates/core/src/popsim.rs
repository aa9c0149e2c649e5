//! Finite-population Monte Carlo under the constructed strategies.
//!
//! The K agents sit on an N-node weighted graph; all agents in cluster `q`
//! play the decentralized feedback `u = −(B/2R)(f_t x + ḡ^q_t)` with `ḡ^q`
//! from the limit solution, while their *dynamics* couple through the
//! empirical network average
//! `z^{oq}_t = (1/N) Σ_l m_{ql} · mean_{j∈C_l} x^j_t`.
//!
//! Alongside the closed loop, each path co-simulates the limiting system
//! `ȳ^i` for a sample of agents, driven by the *same* Brownian increments but
//! with the limit fields `z̄^q, ḡ^q` in place of the empirical ones. The
//! squared gaps between the two systems, and between their realized costs,
//! are the measurable statements of the approximation theory; their decay in
//! `δ_K` is what the convergence module fits.
//!
//! Deviations re-simulate the whole population on the same noise bundle with
//! exactly one agent swapped to an alternative control (common random
//! numbers), so cost differences are sharp enough to bound the empirical ε.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::graphon::MeanProfile;
use crate::grid::TimeGrid;
use crate::limit::{LimitSolution, StrategyProjector};
use crate::noise::{common_noise_rng, stream_rng};

/// Paths per deterministic accumulation block. Parallel reductions merge
/// whole blocks in index order, so results do not depend on thread count.
const CHUNK: usize = 8;

/// Finite-population setup: graph, cluster sizes, initial law, noise budget.
#[derive(Debug, Clone)]
pub struct PopulationConfig {
    pub n_nodes: usize,
    /// `|C_l|` per node; `K = Σ|C_l|`.
    pub cluster_sizes: Vec<usize>,
    /// Initial mean profile; per-node means are its step projection.
    pub mu: MeanProfile,
    /// Initial variance `v_q` per node (Gaussian initial law).
    pub init_variance: Vec<f64>,
    /// Row-major `N×N` adjacency matrix, symmetric, entries in [-1,1].
    pub adjacency: Vec<f64>,
    pub seed: u64,
    pub paths: usize,
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        if n == 0 {
            return Err(CoreError::validation("population needs at least one node"));
        }
        if self.cluster_sizes.len() != n || self.cluster_sizes.contains(&0) {
            return Err(CoreError::validation(
                "cluster sizes must list one positive entry per node",
            ));
        }
        if self.mu.n() != n {
            return Err(CoreError::validation("mean profile node count mismatch"));
        }
        if self.init_variance.len() != n || self.init_variance.iter().any(|v| *v < 0.0) {
            return Err(CoreError::validation(
                "initial variances must list one nonnegative entry per node",
            ));
        }
        if self.adjacency.len() != n * n {
            return Err(CoreError::validation("adjacency matrix size mismatch"));
        }
        for q in 0..n {
            for l in 0..n {
                let v = self.adjacency[q * n + l];
                if !(-1.0..=1.0).contains(&v) || v != self.adjacency[l * n + q] {
                    return Err(CoreError::validation(
                        "adjacency matrix must be symmetric with entries in [-1,1]",
                    ));
                }
            }
        }
        if self.paths == 0 {
            return Err(CoreError::validation(
                "at least one Monte Carlo path is required",
            ));
        }
        Ok(())
    }

    pub fn total_agents(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    /// First agent index of each cluster.
    pub fn cluster_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.n_nodes);
        let mut acc = 0;
        for c in &self.cluster_sizes {
            offs.push(acc);
            acc += c;
        }
        offs
    }

    pub fn node_of_agent(&self) -> Vec<usize> {
        let mut nodes = Vec::with_capacity(self.total_agents());
        for (q, c) in self.cluster_sizes.iter().enumerate() {
            nodes.extend(std::iter::repeat_n(q, *c));
        }
        nodes
    }

    /// One agent per distinct cluster size (the first such cluster in node
    /// order), which is the minimum coverage the ε estimate needs.
    pub fn default_sampled_agents(&self) -> Vec<usize> {
        let offsets = self.cluster_offsets();
        let mut seen = Vec::new();
        let mut agents = Vec::new();
        for (q, size) in self.cluster_sizes.iter().enumerate() {
            if !seen.contains(size) {
                seen.push(*size);
                agents.push(offsets[q]);
            }
        }
        agents
    }
}

/// Lazily generated noise bundle: every draw is a pure function of
/// `(seed, path, agent)`, so re-simulations replay identical randomness.
pub struct PathBundle<'a> {
    cfg: &'a PopulationConfig,
    grid: &'a TimeGrid,
}

/// Materialized noise of one path.
pub struct PathNoise {
    /// ΔW⁰ per step.
    pub common: Vec<f64>,
    /// Δw^i per agent per step.
    pub idio: Vec<Vec<f64>>,
    /// Initial draws x₀^i.
    pub x0: Vec<f64>,
}

impl<'a> PathBundle<'a> {
    pub fn new(cfg: &'a PopulationConfig, grid: &'a TimeGrid) -> PathBundle<'a> {
        PathBundle { cfg, grid }
    }

    pub fn cfg(&self) -> &PopulationConfig {
        self.cfg
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid
    }

    /// Per-agent RNG streams positioned after the initial draw, plus the
    /// initial states. The engine consumes increments from these streams in
    /// step order, which reproduces [`PathBundle::path_noise`] draw for draw.
    fn agent_streams(&self, path: usize) -> (Vec<ChaCha8Rng>, Vec<f64>) {
        let node_of = self.cfg.node_of_agent();
        let mut rngs = Vec::with_capacity(node_of.len());
        let mut x0 = Vec::with_capacity(node_of.len());
        for (i, q) in node_of.iter().enumerate() {
            let mut rng = stream_rng(self.cfg.seed, path as u64, i as u64);
            let xi: f64 = rng.sample(StandardNormal);
            x0.push(self.cfg.mu.per_node()[*q] + self.cfg.init_variance[*q].sqrt() * xi);
            rngs.push(rng);
        }
        (rngs, x0)
    }

    /// Fully materialized noise of one path (tests and single-agent runs).
    pub fn path_noise(&self, path: usize) -> PathNoise {
        let m = self.grid.steps();
        let sqrt_dt = self.grid.dt().sqrt();
        let mut rng0 = common_noise_rng(self.cfg.seed, path as u64);
        let common: Vec<f64> = (0..m)
            .map(|_| sqrt_dt * rng0.sample::<f64, _>(StandardNormal))
            .collect();
        let (mut rngs, x0) = self.agent_streams(path);
        let idio: Vec<Vec<f64>> = rngs
            .iter_mut()
            .map(|rng| {
                (0..m)
                    .map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        PathNoise { common, idio, x0 }
    }
}

/// Alternative controls for the deviating agent. Every entry is an affine
/// feedback reading only `(t, own state, ḡ^q, z̄^q)`, which keeps it
/// admissible and square-integrable by construction.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviationStrategy {
    /// The limit best response `−(B/2R)(f x + ḡ^q)`; coincides with the
    /// equilibrium feedback, kept as a consistency fixture.
    LimitBestResponse,
    ZeroControl,
    /// The equilibrium feedback scaled by γ.
    ScaledFeedback {
        gamma: f64,
    },
    /// `v_t = k₀(t) + k₁(t)·x`; coefficients are a constant (one entry) or a
    /// full grid curve.
    CustomAffine {
        k0: Vec<f64>,
        k1: Vec<f64>,
    },
}

impl DeviationStrategy {
    pub fn name(&self) -> String {
        match self {
            DeviationStrategy::LimitBestResponse => "limit_best_response".into(),
            DeviationStrategy::ZeroControl => "zero_control".into(),
            DeviationStrategy::ScaledFeedback { gamma } => format!("scaled_feedback({gamma})"),
            DeviationStrategy::CustomAffine { .. } => "custom_affine".into(),
        }
    }

    fn coeff(values: &[f64], node: usize) -> f64 {
        if values.len() == 1 {
            values[0]
        } else {
            values[node]
        }
    }

    fn validate(&self, grid_nodes: usize) -> Result<()> {
        if let DeviationStrategy::CustomAffine { k0, k1 } = self {
            for (name, v) in [("k0", k0), ("k1", k1)] {
                if v.len() != 1 && v.len() != grid_nodes {
                    return Err(CoreError::validation(format!(
                        "custom_affine {name} must have 1 or {grid_nodes} entries"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A single-agent unilateral deviation.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationSpec {
    pub agent: usize,
    pub strategy: DeviationStrategy,
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    fn from_sums(sum: f64, sumsq: f64, n: usize) -> Stat {
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 {
            ((sumsq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Stat {
            mean,
            stderr: (var / nf).sqrt(),
        }
    }

    pub fn from_samples(xs: &[f64]) -> Stat {
        let sum: f64 = xs.iter().sum();
        let sumsq: f64 = xs.iter().map(|x| x * x).sum();
        Stat::from_sums(sum, sumsq, xs.len())
    }
}

/// Per-(node, time) and per-(sampled agent, time) gap accumulators.
#[derive(Debug, Clone, Default)]
pub struct GapAccumulators {
    pub paths: usize,
    n_nodes: usize,
    n_times: usize,
    n_sampled: usize,
    z_sq: Vec<f64>,
    z_sq_sq: Vec<f64>,
    z_abs2: Vec<f64>,
    z_abs2_sq: Vec<f64>,
    x_sq: Vec<f64>,
    x_sq_sq: Vec<f64>,
    x_abs2: Vec<f64>,
    x_abs2_sq: Vec<f64>,
}

impl GapAccumulators {
    fn new(n_nodes: usize, n_times: usize, n_sampled: usize) -> GapAccumulators {
        GapAccumulators {
            paths: 0,
            n_nodes,
            n_times,
            n_sampled,
            z_sq: vec![0.0; n_nodes * n_times],
            z_sq_sq: vec![0.0; n_nodes * n_times],
            z_abs2: vec![0.0; n_nodes * n_times],
            z_abs2_sq: vec![0.0; n_nodes * n_times],
            x_sq: vec![0.0; n_sampled * n_times],
            x_sq_sq: vec![0.0; n_sampled * n_times],
            x_abs2: vec![0.0; n_sampled * n_times],
            x_abs2_sq: vec![0.0; n_sampled * n_times],
        }
    }

    fn merge(&mut self, other: &GapAccumulators) {
        self.paths += other.paths;
        for (dst, src) in [
            (&mut self.z_sq, &other.z_sq),
            (&mut self.z_sq_sq, &other.z_sq_sq),
            (&mut self.z_abs2, &other.z_abs2),
            (&mut self.z_abs2_sq, &other.z_abs2_sq),
            (&mut self.x_sq, &other.x_sq),
            (&mut self.x_sq_sq, &other.x_sq_sq),
            (&mut self.x_abs2, &other.x_abs2),
            (&mut self.x_abs2_sq, &other.x_abs2_sq),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// A supremum statistic with the grid time where it is attained.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SupStat {
    pub value: f64,
    pub stderr: f64,
    /// Fraction of the horizon (t/T) at the maximizing node.
    pub at_time: f64,
}

/// The measurable gap statistics between closed-loop and limiting systems.
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    /// `sup_t max_q Ê|z^{oq} − z̄^q|²`
    pub z_gap_sq: SupStat,
    /// `sup_t max_q Ê||z^{oq}|² − |z̄^q|²|`
    pub z_abs_sq_gap: SupStat,
    /// `sup_t max_i Ê|x^{oi} − ȳ^i|²` over sampled agents
    pub x_gap_sq: SupStat,
    /// `sup_t max_i Ê||x^{oi}|² − |ȳ^i|²|`
    pub x_abs_sq_gap: SupStat,
    /// `max_i |Ĵ_i − Ĵ*_i|` over sampled agents, with the paired stderr.
    pub cost_gap: Stat,
}

/// Exported per-path fields for plotting (first few paths only).
#[derive(Debug, Clone, Serialize)]
pub struct PathFieldExport {
    pub path: usize,
    /// `z^{oq}[q][k]`
    pub z_oq: Vec<Vec<f64>>,
    /// `z̄^q[q][k]`
    pub z_bar: Vec<Vec<f64>>,
    /// `ḡ^q[q][k]`
    pub g_bar: Vec<Vec<f64>>,
    /// per-node cluster means (recomputation witnesses for `z^{oq}`)
    pub cluster_means: Vec<Vec<f64>>,
    /// sampled agents' closed-loop trajectories `[s][k]`
    pub sampled_x: Vec<Vec<f64>>,
    /// sampled agents' realized controls `[s][k]`
    pub sampled_u: Vec<Vec<f64>>,
    /// sampled agents' limiting trajectories `[s][k]`
    pub sampled_y: Vec<Vec<f64>>,
}

/// Output of a population simulation on shared noise.
pub struct SimOutput {
    pub grid: TimeGrid,
    pub n_nodes: usize,
    pub paths: usize,
    /// Realized cost Ĵ_i per agent (Monte Carlo mean and stderr).
    pub agent_costs: Vec<Stat>,
    pub sampled_agents: Vec<usize>,
    /// Per-path closed-loop costs of the sampled agents `[s][path]`.
    pub sampled_costs: Vec<Vec<f64>>,
    /// Per-path limiting costs Ĵ*_i of the sampled agents `[s][path]`.
    pub sampled_limit_costs: Vec<Vec<f64>>,
    pub gaps: GapAccumulators,
    pub export: Vec<PathFieldExport>,
}

/// Options for the closed-loop engine.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Agents whose limiting system and costs are co-simulated. Empty picks
    /// the per-distinct-cluster-size default.
    pub sampled_agents: Vec<usize>,
    /// Number of leading paths whose fields are materialized for export.
    pub export_paths: usize,
}

struct Engine<'a> {
    cfg: &'a PopulationConfig,
    sol: &'a LimitSolution,
    grid: &'a TimeGrid,
    projector: StrategyProjector,
    node_of: Vec<usize>,
    offsets: Vec<usize>,
    sampled: Vec<usize>,
    deviation: Option<&'a DeviationSpec>,
    export_paths: usize,
    /// When set, per-agent cost accumulation is restricted to this agent
    /// (deviation runs only need the deviator's cost).
    cost_focus: Option<usize>,
}

struct ChunkResult {
    cost_sum: Vec<f64>,
    cost_sumsq: Vec<f64>,
    sampled_costs: Vec<Vec<f64>>,
    sampled_limit_costs: Vec<Vec<f64>>,
    gaps: GapAccumulators,
    export: Vec<PathFieldExport>,
}

impl Engine<'_> {
    fn run(&self) -> ChunkResult {
        let n_chunks = self.cfg.paths.div_ceil(CHUNK);
        let chunks: Vec<ChunkResult> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(self.cfg.paths);
                self.run_chunk(lo, hi)
            })
            .collect();
        let mut merged = self.empty_result();
        for chunk in chunks {
            for (d, s) in merged.cost_sum.iter_mut().zip(&chunk.cost_sum) {
                *d += s;
            }
            for (d, s) in merged.cost_sumsq.iter_mut().zip(&chunk.cost_sumsq) {
                *d += s;
            }
            for (d, s) in merged.sampled_costs.iter_mut().zip(chunk.sampled_costs) {
                d.extend(s);
            }
            for (d, s) in merged
                .sampled_limit_costs
                .iter_mut()
                .zip(chunk.sampled_limit_costs)
            {
                d.extend(s);
            }
            merged.gaps.merge(&chunk.gaps);
            merged.export.extend(chunk.export);
        }
        merged
    }

    fn empty_result(&self) -> ChunkResult {
        let kk = self.cfg.total_agents();
        ChunkResult {
            cost_sum: vec![0.0; kk],
            cost_sumsq: vec![0.0; kk],
            sampled_costs: vec![Vec::new(); self.sampled.len()],
            sampled_limit_costs: vec![Vec::new(); self.sampled.len()],
            gaps: GapAccumulators::new(self.cfg.n_nodes, self.grid.n_nodes(), self.sampled.len()),
            export: Vec::new(),
        }
    }

    fn run_chunk(&self, lo: usize, hi: usize) -> ChunkResult {
        let mut acc = self.empty_result();
        let bundle = PathBundle::new(self.cfg, self.grid);
        for path in lo..hi {
            self.run_path(path, &bundle, &mut acc);
        }
        acc
    }

    #[allow(clippy::needless_range_loop)]
    fn run_path(&self, path: usize, bundle: &PathBundle, acc: &mut ChunkResult) {
        let p = &self.sol.params;
        let n = self.cfg.n_nodes;
        let kk = self.cfg.total_agents();
        let m = self.grid.steps();
        let nt = m + 1;
        let dt = self.grid.dt();
        let sqrt_dt = dt.sqrt();
        let gain = p.feedback_gain();
        let d_modes = self.sol.modes.len();
        let s_count = self.sampled.len();
        let export = path < self.export_paths;

        let mut rng0 = common_noise_rng(self.cfg.seed, path as u64);
        let (mut agent_rngs, x0) = bundle.agent_streams(path);

        let mut x = x0;
        let mut ybar: Vec<f64> = self.sampled.iter().map(|&i| x[i]).collect();
        let mut z_modes: Vec<f64> = self.sol.modes.iter().map(|md| md.z0).collect();
        let mut g_modes = vec![0.0; d_modes];
        let mut gbar = vec![0.0; n];
        let mut zbar = vec![0.0; n];
        let mut cluster_mean = vec![0.0; n];
        let mut z_oq = vec![0.0; n];
        let mut idio = vec![0.0; kk];

        let mut cost = vec![0.0; kk];
        let mut limit_cost = vec![0.0; s_count];

        let mut exp = export.then(|| PathFieldExport {
            path,
            z_oq: vec![vec![0.0; nt]; n],
            z_bar: vec![vec![0.0; nt]; n],
            g_bar: vec![vec![0.0; nt]; n],
            cluster_means: vec![vec![0.0; nt]; n],
            sampled_x: vec![vec![0.0; nt]; s_count],
            sampled_u: vec![vec![0.0; nt]; s_count],
            sampled_y: vec![vec![0.0; nt]; s_count],
        });

        for k in 0..=m {
            // limit fields at node k
            for l in 0..d_modes {
                let md = &self.sol.modes[l];
                g_modes[l] = md.k[k] * z_modes[l] + md.phi[k];
            }
            for q in 0..n {
                gbar[q] = self.projector.gbar(q, &g_modes, self.sol.g_ring[k]);
                zbar[q] = self.projector.zbar(q, &z_modes);
            }
            // empirical cluster means and network averages at node k
            for q in 0..n {
                let (off, size) = (self.offsets[q], self.cfg.cluster_sizes[q]);
                cluster_mean[q] = x[off..off + size].iter().sum::<f64>() / size as f64;
            }
            for q in 0..n {
                let mut z = 0.0;
                for l in 0..n {
                    z += self.cfg.adjacency[q * n + l] * cluster_mean[l];
                }
                z_oq[q] = z / n as f64;
            }

            // gap accumulators at node k (states not yet advanced)
            {
                let g = &mut acc.gaps;
                for q in 0..n {
                    let dz = z_oq[q] - zbar[q];
                    let sq = dz * dz;
                    let abs2 = (z_oq[q] * z_oq[q] - zbar[q] * zbar[q]).abs();
                    let idx = q * nt + k;
                    g.z_sq[idx] += sq;
                    g.z_sq_sq[idx] += sq * sq;
                    g.z_abs2[idx] += abs2;
                    g.z_abs2_sq[idx] += abs2 * abs2;
                }
                for (s, &i) in self.sampled.iter().enumerate() {
                    let dx = x[i] - ybar[s];
                    let sq = dx * dx;
                    let abs2 = (x[i] * x[i] - ybar[s] * ybar[s]).abs();
                    let idx = s * nt + k;
                    g.x_sq[idx] += sq;
                    g.x_sq_sq[idx] += sq * sq;
                    g.x_abs2[idx] += abs2;
                    g.x_abs2_sq[idx] += abs2 * abs2;
                }
            }

            if let Some(e) = exp.as_mut() {
                for q in 0..n {
                    e.z_oq[q][k] = z_oq[q];
                    e.z_bar[q][k] = zbar[q];
                    e.g_bar[q][k] = gbar[q];
                    e.cluster_means[q][k] = cluster_mean[q];
                }
                for (s, &i) in self.sampled.iter().enumerate() {
                    e.sampled_x[s][k] = x[i];
                    e.sampled_y[s][k] = ybar[s];
                }
            }

            let w = if k == 0 || k == m { 0.5 * dt } else { dt };
            let f_k = self.sol.f[k];
            let dw0 = if k < m {
                sqrt_dt * rng0.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            if k < m {
                for (i, rng) in agent_rngs.iter_mut().enumerate() {
                    idio[i] = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                }
            }

            // closed-loop sweep: control, cost, state update
            for q in 0..n {
                let (off, size) = (self.offsets[q], self.cfg.cluster_sizes[q]);
                let nu = p.h * (z_oq[q] + p.eta);
                let gb = gbar[q];
                let dz = p.d * z_oq[q];
                for i in off..off + size {
                    let xi = x[i];
                    let u = match self.deviation {
                        Some(dev) if dev.agent == i => {
                            self.deviation_control(&dev.strategy, k, xi, gb, zbar[q], f_k, gain)
                        }
                        _ => -gain * (f_k * xi + gb),
                    };
                    if let Some(e) = exp.as_mut() {
                        if let Some(slot) = self.sampled.iter().position(|&sampled| sampled == i) {
                            e.sampled_u[slot][k] = u;
                        }
                    }
                    if self.cost_focus.is_none_or(|focus| focus == i) {
                        let track = xi - nu;
                        cost[i] += w * (p.q * track * track + p.r * u * u);
                        if k == m {
                            cost[i] += p.q_t * track * track;
                        }
                    }
                    if k < m {
                        x[i] = xi
                            + (p.a * xi + p.b * u + dz) * dt
                            + p.sigma * idio[i]
                            + p.sigma0 * dw0;
                    }
                }
            }

            // limiting systems of the sampled agents on the same noise
            for (s, &i) in self.sampled.iter().enumerate() {
                let q = self.node_of[i];
                let y = ybar[s];
                let u = -gain * (f_k * y + gbar[q]);
                let track = y - p.h * (zbar[q] + p.eta);
                limit_cost[s] += w * (p.q * track * track + p.r * u * u);
                if k == m {
                    limit_cost[s] += p.q_t * track * track;
                }
                if k < m {
                    ybar[s] = y
                        + (p.a * y + p.b * u + p.d * zbar[q]) * dt
                        + p.sigma * idio[i]
                        + p.sigma0 * dw0;
                }
            }

            // advance the mode states
            if k < m {
                for l in 0..d_modes {
                    let md = &self.sol.modes[l];
                    z_modes[l] += (md.drift_slope[k] * z_modes[l] + md.drift_offset[k]) * dt
                        + md.diffusion * dw0;
                }
            }
        }

        acc.gaps.paths += 1;
        match self.cost_focus {
            None => {
                for i in 0..kk {
                    acc.cost_sum[i] += cost[i];
                    acc.cost_sumsq[i] += cost[i] * cost[i];
                }
            }
            Some(focus) => {
                acc.cost_sum[focus] += cost[focus];
                acc.cost_sumsq[focus] += cost[focus] * cost[focus];
            }
        }
        for (s, &i) in self.sampled.iter().enumerate() {
            acc.sampled_costs[s].push(cost[i]);
            acc.sampled_limit_costs[s].push(limit_cost[s]);
        }
        if let Some(e) = exp {
            acc.export.push(e);
        }
    }

    /// Evaluates the deviating agent's control. The admissible information
    /// set is time, own state, and the limit fields of the agent's own
    /// cluster; other agents' states are never readable.
    #[allow(clippy::too_many_arguments)]
    fn deviation_control(
        &self,
        strategy: &DeviationStrategy,
        k: usize,
        x: f64,
        gbar: f64,
        _zbar: f64,
        f_k: f64,
        gain: f64,
    ) -> f64 {
        match strategy {
            DeviationStrategy::LimitBestResponse => -gain * (f_k * x + gbar),
            DeviationStrategy::ZeroControl => 0.0,
            DeviationStrategy::ScaledFeedback { gamma } => gamma * (-gain * (f_k * x + gbar)),
            DeviationStrategy::CustomAffine { k0, k1 } => {
                DeviationStrategy::coeff(k0, k) + DeviationStrategy::coeff(k1, k) * x
            }
        }
    }
}

fn build_engine<'a>(
    cfg: &'a PopulationConfig,
    sol: &'a LimitSolution,
    bundle: &'a PathBundle<'a>,
    sampled: Vec<usize>,
    deviation: Option<&'a DeviationSpec>,
    export_paths: usize,
    cost_focus: Option<usize>,
) -> Result<Engine<'a>> {
    cfg.validate()?;
    if bundle.grid() != &sol.grid {
        return Err(CoreError::validation(
            "bundle and limit solution use different grids",
        ));
    }
    let kk = cfg.total_agents();
    for &i in &sampled {
        if i >= kk {
            return Err(CoreError::validation(format!(
                "sampled agent {i} out of range"
            )));
        }
    }
    if let Some(dev) = deviation {
        if dev.agent >= kk {
            return Err(CoreError::validation(format!(
                "deviating agent {} out of range",
                dev.agent
            )));
        }
        dev.strategy.validate(sol.grid.n_nodes())?;
    }
    Ok(Engine {
        cfg,
        sol,
        grid: bundle.grid(),
        projector: StrategyProjector::new(&sol.basis, cfg.n_nodes),
        node_of: cfg.node_of_agent(),
        offsets: cfg.cluster_offsets(),
        sampled,
        deviation,
        export_paths,
        cost_focus,
    })
}

/// Simulates the K-agent closed-loop system under the constructed strategies,
/// co-simulating the limiting system for the sampled agents on the same
/// noise. Deterministic in `(scenario, seed)` regardless of thread count.
pub fn simulate_closed_loop(
    cfg: &PopulationConfig,
    sol: &LimitSolution,
    bundle: &PathBundle,
    opts: &SimOptions,
) -> Result<SimOutput> {
    let sampled = if opts.sampled_agents.is_empty() {
        cfg.default_sampled_agents()
    } else {
        opts.sampled_agents.clone()
    };
    let engine = build_engine(
        cfg,
        sol,
        bundle,
        sampled.clone(),
        None,
        opts.export_paths,
        None,
    )?;
    let raw = engine.run();
    let paths = cfg.paths;
    let agent_costs = raw
        .cost_sum
        .iter()
        .zip(&raw.cost_sumsq)
        .map(|(s, sq)| Stat::from_sums(*s, *sq, paths))
        .collect();
    Ok(SimOutput {
        grid: bundle.grid().clone(),
        n_nodes: cfg.n_nodes,
        paths,
        agent_costs,
        sampled_agents: sampled,
        sampled_costs: raw.sampled_costs,
        sampled_limit_costs: raw.sampled_limit_costs,
        gaps: raw.gaps,
        export: raw.export,
    })
}

/// Standalone limiting system for one agent: `ȳ^i` driven by the agent's own
/// noise with the limit fields in place of the empirical ones. Returns the
/// per-path limiting costs Ĵ*_i.
pub fn simulate_limiting(
    cfg: &PopulationConfig,
    sol: &LimitSolution,
    bundle: &PathBundle,
    agent: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if agent >= cfg.total_agents() {
        return Err(CoreError::validation(format!("agent {agent} out of range")));
    }
    let p = &sol.params;
    let grid = bundle.grid();
    let m = grid.steps();
    let dt = grid.dt();
    let gain = p.feedback_gain();
    let q_node = cfg.node_of_agent()[agent];
    let projector = StrategyProjector::new(&sol.basis, cfg.n_nodes);
    let d_modes = sol.modes.len();

    let costs: Vec<f64> = (0..cfg.paths)
        .map(|path| {
            let noise = bundle.path_noise(path);
            let mut z_modes: Vec<f64> = sol.modes.iter().map(|md| md.z0).collect();
            let mut g_modes = vec![0.0; d_modes];
            let mut y = noise.x0[agent];
            let mut cost = 0.0;
            for k in 0..=m {
                for l in 0..d_modes {
                    let md = &sol.modes[l];
                    g_modes[l] = md.k[k] * z_modes[l] + md.phi[k];
                }
                let gbar = projector.gbar(q_node, &g_modes, sol.g_ring[k]);
                let zbar = projector.zbar(q_node, &z_modes);
                let u = -gain * (sol.f[k] * y + gbar);
                let track = y - p.h * (zbar + p.eta);
                let w = if k == 0 || k == m { 0.5 * dt } else { dt };
                cost += w * (p.q * track * track + p.r * u * u);
                if k == m {
                    cost += p.q_t * track * track;
                } else {
                    y += (p.a * y + p.b * u + p.d * zbar) * dt
                        + p.sigma * noise.idio[agent][k]
                        + p.sigma0 * noise.common[k];
                    for (md, z) in sol.modes.iter().zip(z_modes.iter_mut()) {
                        *z += (md.drift_slope[k] * *z + md.drift_offset[k]) * dt
                            + md.diffusion * noise.common[k];
                    }
                }
            }
            cost
        })
        .collect();
    Ok(costs)
}

/// Output of a unilateral-deviation run.
pub struct DeviationOutput {
    pub agent: usize,
    pub strategy: DeviationStrategy,
    /// Per-path realized cost of the deviating agent.
    pub costs: Vec<f64>,
    pub cost: Stat,
}

/// Re-simulates the full population on the same noise with exactly one agent
/// using the alternative control; everyone else keeps the equilibrium
/// feedback.
pub fn simulate_deviation(
    cfg: &PopulationConfig,
    sol: &LimitSolution,
    bundle: &PathBundle,
    dev: &DeviationSpec,
) -> Result<DeviationOutput> {
    let engine = build_engine(
        cfg,
        sol,
        bundle,
        vec![dev.agent],
        Some(dev),
        0,
        Some(dev.agent),
    )?;
    let raw = engine.run();
    let costs = raw.sampled_costs.into_iter().next().unwrap_or_default();
    let cost = Stat::from_samples(&costs);
    Ok(DeviationOutput {
        agent: dev.agent,
        strategy: dev.strategy.clone(),
        costs,
        cost,
    })
}

/// Per-path trapezoid quadrature of the tracking cost
/// `∫ [Q(x−ν)² + R u²] dt + Q_T (x_T−ν_T)²`.
pub fn cost_quadrature(
    p: &crate::limit::ModelParams,
    grid: &TimeGrid,
    xs: &[f64],
    us: &[f64],
    nus: &[f64],
) -> Result<f64> {
    let nt = grid.n_nodes();
    if xs.len() != nt || us.len() != nt || nus.len() != nt {
        return Err(CoreError::validation(
            "trajectory length must match the time grid",
        ));
    }
    let running: Vec<f64> = (0..nt)
        .map(|k| {
            let track = xs[k] - nus[k];
            p.q * track * track + p.r * us[k] * us[k]
        })
        .collect();
    let terminal = xs[nt - 1] - nus[nt - 1];
    Ok(grid.trapezoid(&running) + p.q_t * terminal * terminal)
}

/// Turns the raw accumulators into the approximation statistics of the limit
/// theory.
pub fn gap_statistics(out: &SimOutput) -> GapReport {
    let g = &out.gaps;
    let nt = g.n_times;
    let paths = g.paths as f64;

    let sup_of = |sum: &[f64], sumsq: &[f64], rows: usize| -> SupStat {
        if rows == 0 || nt == 0 {
            return SupStat {
                value: 0.0,
                stderr: 0.0,
                at_time: 0.0,
            };
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for r in 0..rows {
            for k in 0..nt {
                let mean = sum[r * nt + k] / paths;
                if mean > best {
                    best = mean;
                    best_idx = r * nt + k;
                }
            }
        }
        let mean = sum[best_idx] / paths;
        let var =
            ((sumsq[best_idx] / paths - mean * mean) * paths / (paths - 1.0).max(1.0)).max(0.0);
        SupStat {
            value: mean,
            stderr: (var / paths).sqrt(),
            at_time: (best_idx % nt) as f64 / (nt as f64 - 1.0),
        }
    };

    // cost gap |Ĵ_i − Ĵ*_i| with paired stderr, worst sampled agent
    let mut cost_gap = Stat {
        mean: 0.0,
        stderr: 0.0,
    };
    for (eq, lim) in out.sampled_costs.iter().zip(&out.sampled_limit_costs) {
        let diffs: Vec<f64> = eq.iter().zip(lim).map(|(a, b)| a - b).collect();
        let st = Stat::from_samples(&diffs);
        if st.mean.abs() > cost_gap.mean {
            cost_gap = Stat {
                mean: st.mean.abs(),
                stderr: st.stderr,
            };
        }
    }

    GapReport {
        z_gap_sq: sup_of(&g.z_sq, &g.z_sq_sq, g.n_nodes),
        z_abs_sq_gap: sup_of(&g.z_abs2, &g.z_abs2_sq, g.n_nodes),
        x_gap_sq: sup_of(&g.x_sq, &g.x_sq_sq, g.n_sampled),
        x_abs_sq_gap: sup_of(&g.x_abs2, &g.x_abs2_sq, g.n_sampled),
        cost_gap,
    }
}

/// One (agent, deviation) row of the ε estimate.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonPair {
    pub agent: usize,
    pub strategy: String,
    /// `Ĵ_i(u°) − Ĵ_i(v)`: positive means the deviation improved on the
    /// equilibrium.
    pub mean_excess: f64,
    pub stderr: f64,
    /// One-sided 95% upper confidence bound on the excess.
    pub upper95: f64,
}

/// Empirical ε-Nash estimate over a deviation library.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonReport {
    pub pairs: Vec<EpsilonPair>,
    /// `ε̂ = max(0, max mean excess)`: nonnegative by construction, zero when
    /// no deviation beats the equilibrium on average.
    pub epsilon_hat: f64,
    /// `max(0, max upper95)`: the one-sided confidence bound on ε̂.
    pub epsilon_upper95: f64,
    /// `δ_K^{1/2}` for context when the caller knows δ_K.
    pub delta_k_sqrt: Option<f64>,
}

/// Estimates the empirical ε: re-simulates every (sampled agent, deviation)
/// pair on common random numbers and takes the largest positive cost
/// improvement a unilateral deviation achieves.
pub fn estimate_epsilon(
    cfg: &PopulationConfig,
    sol: &LimitSolution,
    bundle: &PathBundle,
    deviations: &[DeviationStrategy],
    agents: &[usize],
    delta_k: Option<f64>,
) -> Result<EpsilonReport> {
    let agents: Vec<usize> = if agents.is_empty() {
        cfg.default_sampled_agents()
    } else {
        agents.to_vec()
    };
    let opts = SimOptions {
        sampled_agents: agents.clone(),
        export_paths: 0,
    };
    let base = simulate_closed_loop(cfg, sol, bundle, &opts)?;
    estimate_epsilon_from(&base, cfg, sol, bundle, deviations, delta_k)
}

/// Same as [`estimate_epsilon`] but reuses an existing equilibrium run whose
/// sampled agents define the deviation candidates.
pub fn estimate_epsilon_from(
    base: &SimOutput,
    cfg: &PopulationConfig,
    sol: &LimitSolution,
    bundle: &PathBundle,
    deviations: &[DeviationStrategy],
    delta_k: Option<f64>,
) -> Result<EpsilonReport> {
    if deviations.is_empty() {
        return Err(CoreError::validation("deviation library is empty"));
    }
    let mut pairs = Vec::new();
    for (s, &agent) in base.sampled_agents.iter().enumerate() {
        for strategy in deviations {
            let dev = DeviationSpec {
                agent,
                strategy: strategy.clone(),
            };
            let out = simulate_deviation(cfg, sol, bundle, &dev)?;
            let diffs: Vec<f64> = base.sampled_costs[s]
                .iter()
                .zip(&out.costs)
                .map(|(eq, alt)| eq - alt)
                .collect();
            let st = Stat::from_samples(&diffs);
            pairs.push(EpsilonPair {
                agent,
                strategy: strategy.name(),
                mean_excess: st.mean,
                stderr: st.stderr,
                upper95: st.mean + 1.645 * st.stderr,
            });
        }
    }
    let epsilon_hat = pairs.iter().map(|p| p.mean_excess).fold(0.0f64, f64::max);
    let epsilon_upper95 = pairs.iter().map(|p| p.upper95).fold(0.0f64, f64::max);
    Ok(EpsilonReport {
        pairs,
        epsilon_hat,
        epsilon_upper95,
        delta_k_sqrt: delta_k.map(f64::sqrt),
    })
}
