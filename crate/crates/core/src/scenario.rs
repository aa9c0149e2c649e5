//! TOML scenario schema: one file describes a whole experiment.
//!
//! A scenario pins the model coefficients, the graphon (named kernel or
//! adjacency file), how its spectrum is obtained, the initial mean profile,
//! the population layout, the time grid, the deviation library, and output
//! options. Everything is validated before any computation, and the resolved
//! form (defaults filled in, overrides applied) can be echoed back out so a
//! run's inputs are always reproducible from its output directory.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::convergence::LadderScenario;
use crate::error::{CoreError, Result};
use crate::graphon::{
    load_adjacency_csv, mean_l1_error, sectional_l1_error, Graphon, Kernel, MeanProfile, MuProfile,
};
use crate::grid::{PartitionGrid, TimeGrid};
use crate::limit::ModelParams;
use crate::popsim::{DeviationStrategy, PopulationConfig};
use crate::spectral::{analytic_eigenpairs, numeric_eigenpairs, SpectralBasis};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub model: ModelParams,
    pub graphon: GraphonSpec,
    pub spectral: SpectralSpec,
    pub mu: MuProfile,
    pub grid: GridSpec,
    pub population: PopulationSpec,
    #[serde(default)]
    pub deviations: Vec<DeviationStrategy>,
    #[serde(default)]
    pub ladder: Option<LadderSpec>,
    #[serde(default)]
    pub outputs: OutputSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphonSpec {
    Sinusoidal,
    UniformAttachment,
    RankOne {
        a: f64,
    },
    /// Adjacency matrix CSV, resolved relative to the scenario file.
    Adjacency {
        file: PathBuf,
    },
}

impl GraphonSpec {
    pub fn kernel(&self) -> Option<Kernel> {
        match self {
            GraphonSpec::Sinusoidal => Some(Kernel::Sinusoidal),
            GraphonSpec::UniformAttachment => Some(Kernel::UniformAttachment),
            GraphonSpec::RankOne { a } => Some(Kernel::RankOne { a: *a }),
            GraphonSpec::Adjacency { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralSpec {
    /// Closed-form eigenpairs of the named kernel (finite-rank kernels only).
    Analytic,
    /// Numeric eigendecomposition of the step graphon, keeping `rank` pairs.
    Numeric { rank: usize },
    /// Leading `modes` closed-form eigenpairs of an infinite-rank kernel.
    Truncated { modes: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub steps: usize,
    #[serde(default = "default_points_per_cell")]
    pub points_per_cell: usize,
}

fn default_points_per_cell() -> usize {
    crate::grid::DEFAULT_POINTS_PER_CELL
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_nodes: usize,
    /// Uniform cluster size; mutually exclusive with `cluster_sizes`.
    #[serde(default)]
    pub cluster_size: Option<usize>,
    #[serde(default)]
    pub cluster_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub init_variance: f64,
    pub paths: usize,
    pub seed: u64,
    /// Agents whose limiting systems and costs are tracked; empty means one
    /// agent per distinct cluster size.
    #[serde(default)]
    pub sample_agents: Vec<usize>,
}

impl PopulationSpec {
    pub fn cluster_sizes(&self) -> Result<Vec<usize>> {
        match (&self.cluster_size, &self.cluster_sizes) {
            (Some(c), None) => Ok(vec![*c; self.n_nodes]),
            (None, Some(v)) => {
                if v.len() != self.n_nodes {
                    return Err(CoreError::validation(format!(
                        "cluster_sizes has {} entries, expected {}",
                        v.len(),
                        self.n_nodes
                    )));
                }
                Ok(v.clone())
            }
            (Some(_), Some(_)) => Err(CoreError::validation(
                "give either cluster_size or cluster_sizes, not both",
            )),
            (None, None) => Err(CoreError::validation(
                "population needs cluster_size or cluster_sizes",
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    /// `(N, cluster size)` rungs, strictly increasing in both coordinates.
    pub points: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Output directory; when absent the CLI falls back to `--out`, then the
    /// `GMFG_OUT` environment variable, then `out`.
    pub dir: Option<PathBuf>,
    /// Leading paths whose cluster fields are exported as CSV.
    pub export_paths: usize,
    /// Emit per-mode SDE paths as CSV.
    pub write_mode_paths: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: None,
            export_paths: 4,
            write_mode_paths: false,
        }
    }
}

/// Everything a command needs, constructed and cross-validated.
pub struct BuiltScenario {
    /// The limit graphon (analytic kernel, or the step graphon itself when
    /// the scenario is an adjacency file).
    pub limit_graphon: Graphon,
    /// The finite population's step graphon.
    pub step: Graphon,
    pub basis: SpectralBasis,
    pub mu: MeanProfile,
    pub cfg: PopulationConfig,
    pub grid: TimeGrid,
    pub deviations: Vec<DeviationStrategy>,
    pub sample_agents: Vec<usize>,
    pub e_n: f64,
    pub e_n_prime: f64,
    pub delta_k: f64,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::validation(format!("cannot read scenario {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Scenario::parse(&text, base)
    }

    /// Parses and validates; relative file references resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Scenario> {
        let mut scn: Scenario = toml::from_str(text)
            .map_err(|e| CoreError::validation(format!("scenario parse error: {e}")))?;
        if scn.schema_version != SCHEMA_VERSION {
            return Err(CoreError::validation(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                scn.schema_version
            )));
        }
        if let GraphonSpec::Adjacency { file } = &mut scn.graphon {
            if file.is_relative() {
                *file = base_dir.join(&file);
            }
            if !file.exists() {
                return Err(CoreError::validation(format!(
                    "adjacency file {} does not exist",
                    file.display()
                )));
            }
        }
        scn.validate()?;
        Ok(scn)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.grid.steps == 0 {
            return Err(CoreError::validation("grid.steps must be positive"));
        }
        if self.grid.points_per_cell < 4 {
            return Err(CoreError::validation(
                "grid.points_per_cell must be at least 4",
            ));
        }
        if self.population.n_nodes == 0 {
            return Err(CoreError::validation("population.n_nodes must be positive"));
        }
        if self.population.paths == 0 {
            return Err(CoreError::validation("population.paths must be positive"));
        }
        if self.population.init_variance < 0.0 {
            return Err(CoreError::validation("init_variance must be nonnegative"));
        }
        let sizes = self.population.cluster_sizes()?;
        let total: usize = sizes.iter().sum();
        for &a in &self.population.sample_agents {
            if a >= total {
                return Err(CoreError::validation(format!(
                    "sample agent {a} out of range (K = {total})"
                )));
            }
        }
        if let MuProfile::PerNode { values } = &self.mu {
            if values.len() != self.population.n_nodes {
                return Err(CoreError::validation("per-node mu length mismatch"));
            }
        }
        match (&self.spectral, &self.graphon) {
            (SpectralSpec::Analytic, GraphonSpec::UniformAttachment) => {
                return Err(CoreError::validation(
                    "the uniform-attachment kernel has infinite rank; use spectral mode \
                     'truncated' with a mode count",
                ));
            }
            (
                SpectralSpec::Analytic | SpectralSpec::Truncated { .. },
                GraphonSpec::Adjacency { .. },
            ) => {
                return Err(CoreError::validation(
                    "adjacency graphons have no closed-form spectrum; use spectral mode \
                     'numeric'",
                ));
            }
            (SpectralSpec::Truncated { modes }, _) => {
                if *modes == 0 {
                    return Err(CoreError::validation("truncation needs at least one mode"));
                }
            }
            (SpectralSpec::Numeric { rank }, _)
                if (*rank == 0 || *rank > self.population.n_nodes) =>
            {
                return Err(CoreError::validation(format!(
                    "numeric rank must be in 1..=N = {}",
                    self.population.n_nodes
                )));
            }
            _ => {}
        }
        if let Some(ladder) = &self.ladder {
            if ladder.points.is_empty() {
                return Err(CoreError::validation("ladder.points must not be empty"));
            }
            if self.graphon.kernel().is_none() {
                return Err(CoreError::validation(
                    "ladder studies need an analytic limit kernel",
                ));
            }
        }
        Ok(())
    }

    /// The resolved configuration (defaults filled), for echoing next to the
    /// outputs.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.model.t_horizon, self.grid.steps)
    }

    /// Builds every runtime object and the δ_K summary for this scenario.
    pub fn build(&self) -> Result<BuiltScenario> {
        let n = self.population.n_nodes;
        let m = self.grid.points_per_cell;
        let mu = MeanProfile::project(self.mu.clone(), n)?;
        let pgrid = PartitionGrid::new(n, m)?;

        let (limit_graphon, step) = match &self.graphon {
            GraphonSpec::Adjacency { file } => {
                let step = load_adjacency_csv(file)?;
                let sn = step.as_step().expect("loaded step").n();
                if sn != n {
                    return Err(CoreError::validation(format!(
                        "adjacency file has N = {sn} nodes but population.n_nodes = {n}"
                    )));
                }
                (step.clone(), step)
            }
            spec => {
                let kernel = Graphon::Analytic(spec.kernel().expect("analytic"));
                let step = kernel.sample_step(n)?;
                (kernel, step)
            }
        };

        let basis = match self.spectral {
            SpectralSpec::Analytic => {
                let kernel = self.graphon.kernel().expect("validated analytic");
                analytic_eigenpairs(&kernel, None, &mu, &pgrid)?
            }
            SpectralSpec::Truncated { modes } => {
                let kernel = self.graphon.kernel().expect("validated analytic");
                analytic_eigenpairs(&kernel, Some(modes), &mu, &pgrid)?
            }
            SpectralSpec::Numeric { rank } => numeric_eigenpairs(&step, rank, &mu)?,
        };

        // When the limit graphon is the step graphon itself the sampling
        // error vanishes by construction.
        let e_n = match &self.graphon {
            GraphonSpec::Adjacency { .. } => 0.0,
            _ => sectional_l1_error(&limit_graphon, &step, m)?,
        };
        let e_n_prime = mean_l1_error(&mu, m)?;
        let sizes = self.population.cluster_sizes()?;
        let min_cluster = *sizes.iter().min().expect("nonempty");
        let delta_k = crate::convergence::delta_k(e_n, e_n_prime, min_cluster);

        let cfg = PopulationConfig {
            n_nodes: n,
            cluster_sizes: sizes,
            mu: mu.clone(),
            init_variance: vec![self.population.init_variance; n],
            adjacency: step.as_step().expect("step").matrix().to_vec(),
            seed: self.population.seed,
            paths: self.population.paths,
        };
        cfg.validate()?;
        let sample_agents = if self.population.sample_agents.is_empty() {
            cfg.default_sampled_agents()
        } else {
            self.population.sample_agents.clone()
        };

        Ok(BuiltScenario {
            limit_graphon,
            step,
            basis,
            mu,
            cfg,
            grid: self.time_grid()?,
            deviations: self.deviations.clone(),
            sample_agents,
            e_n,
            e_n_prime,
            delta_k,
        })
    }

    /// The ladder view of this scenario (requires a `[ladder]` section).
    pub fn ladder(&self) -> Result<(LadderScenario, Vec<(usize, usize)>)> {
        let spec = self
            .ladder
            .as_ref()
            .ok_or_else(|| CoreError::validation("scenario has no [ladder] section"))?;
        let kernel = self
            .graphon
            .kernel()
            .ok_or_else(|| CoreError::validation("ladder needs an analytic kernel"))?;
        let truncation = match self.spectral {
            SpectralSpec::Truncated { modes } => Some(modes),
            _ => None,
        };
        Ok((
            LadderScenario {
                params: self.model,
                kernel,
                truncation,
                mu: self.mu.clone(),
                init_variance: self.population.init_variance,
                steps: self.grid.steps,
                points_per_cell: self.grid.points_per_cell,
                deviations: self.deviations.clone(),
            },
            spec.points.clone(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NETWORK_SECURITY: &str = r#"
schema_version = 1

[model]
a = 1.0
b = 2.0
d = 1.0
sigma = 0.4
sigma0 = 1.0
eta = 1.0
h = 2.0
q = 1.5
q_t = 1.5
r = 2.0
t_horizon = 1.0

[graphon]
kind = "sinusoidal"

[spectral]
mode = "analytic"

[mu]
kind = "constant"
value = 1.0

[grid]
steps = 200

[population]
n_nodes = 16
cluster_size = 20
init_variance = 0.25
paths = 64
seed = 7
"#;

    #[test]
    fn parses_and_builds_network_security() {
        let scn = Scenario::parse(NETWORK_SECURITY, Path::new(".")).unwrap();
        let built = scn.build().unwrap();
        assert_eq!(built.basis.len(), 2);
        assert_eq!(built.cfg.total_agents(), 320);
        assert!(built.e_n > 0.0 && built.e_n < 4.0 * std::f64::consts::PI / 16.0);
        assert_eq!(built.e_n_prime, 0.0);
        // resolved echo round-trips
        let echo = scn.resolved_toml();
        let again = Scenario::parse(&echo, Path::new(".")).unwrap();
        assert_eq!(again.population.seed, 7);
        assert_eq!(again.grid.points_per_cell, 8); // default filled
    }

    #[test]
    fn rejects_inconsistent_scenarios() {
        // analytic spectrum of an infinite-rank kernel
        let bad =
            NETWORK_SECURITY.replace("kind = \"sinusoidal\"", "kind = \"uniform_attachment\"");
        assert!(Scenario::parse(&bad, Path::new(".")).is_err());
        // unknown field
        let bad = NETWORK_SECURITY.replace("cluster_size = 20", "cluster_size = 20\nbogus = 1");
        assert!(Scenario::parse(&bad, Path::new(".")).is_err());
        // schema version
        let bad = NETWORK_SECURITY.replace("schema_version = 1", "schema_version = 9");
        assert!(Scenario::parse(&bad, Path::new(".")).is_err());
        // missing adjacency file
        let bad = NETWORK_SECURITY.replace(
            "kind = \"sinusoidal\"",
            "kind = \"adjacency\"\nfile = \"no/such/file.csv\"",
        );
        assert!(Scenario::parse(&bad, Path::new(".")).is_err());
    }

    #[test]
    fn adjacency_round_trip_build() {
        let dir = tempfile::tempdir().unwrap();
        let adj = dir.path().join("net.csv");
        let m = Graphon::Analytic(Kernel::Sinusoidal)
            .sample_matrix(4)
            .unwrap();
        crate::graphon::save_adjacency_csv(&adj, &m, 4).unwrap();
        let text = NETWORK_SECURITY
            .replace(
                "kind = \"sinusoidal\"",
                "kind = \"adjacency\"\nfile = \"net.csv\"",
            )
            .replace("mode = \"analytic\"", "mode = \"numeric\"\nrank = 2")
            .replace("n_nodes = 16", "n_nodes = 4");
        let scn = Scenario::parse(&text, dir.path()).unwrap();
        let built = scn.build().unwrap();
        assert_eq!(built.e_n, 0.0);
        assert_eq!(built.basis.len(), 2);
        for p in &built.basis.pairs {
            assert!((p.lambda + 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn ladder_section_resolves() {
        let text = format!("{NETWORK_SECURITY}\n[ladder]\npoints = [[4,10],[8,40]]\n");
        let scn = Scenario::parse(&text, Path::new(".")).unwrap();
        let (ladder, points) = scn.ladder().unwrap();
        assert_eq!(points, vec![(4, 10), (8, 40)]);
        assert_eq!(ladder.steps, 200);
        // scenarios without the section refuse
        let scn = Scenario::parse(NETWORK_SECURITY, Path::new(".")).unwrap();
        assert!(scn.ladder().is_err());
    }
}
