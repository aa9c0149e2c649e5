//! Graphon representations and the norms that drive the convergence theory.
//!
//! A graphon here is a symmetric measurable kernel `M : [0,1]² → [-1,1]`
//! (signed weights are allowed). Three representations share one interface:
//!
//! - analytic kernels registered by name (sinusoidal, uniform attachment,
//!   rank-one), so scenario files stay serializable;
//! - finite-rank expansions `Σ_l λ_l f_l(α) f_l(β)`;
//! - step graphons induced by an `N×N` adjacency matrix on the uniform
//!   partition of `[0,1]`.
//!
//! The kernel acts on grid functions as the integral operator
//! `(Mφ)(α) = ∫ M(α,β) φ(β) dβ`. Two error functionals measure how well a
//! finite graph approximates its limit:
//!
//! - the sectional L1 error `E_N = max_q N·‖(M − M^[N]) 1_{P_q}‖₁`, where the
//!   integral over the cell is taken *before* the absolute value — this
//!   ordering is strictly stronger than cut-norm convergence and is what the
//!   ε-Nash analysis needs;
//! - the mean-profile error `E_N' = ‖μ^[N] − μ‖₁`.
//!
//! A cut-norm *lower bound* is provided as a diagnostic only; the exact cut
//! norm is not computed.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::grid::PartitionGrid;
use crate::spectral::EigenFunction;

/// Named closed-form kernels. Parameters live in the variant so a kernel is
/// fully described by its serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `M(α,β) = -cos(2π(α-β))`; rank 2 with both eigenvalues -1/2.
    Sinusoidal,
    /// `M(α,β) = 1 - max(α,β)`; infinite rank, eigenvalues `4/(k²π²)`, k odd.
    UniformAttachment,
    /// `M(α,β) = a·v(α)v(β)` with `v(α) = 1/(√2 (α+1/2)^{1/4})`; rank 1.
    RankOne { a: f64 },
}

impl Kernel {
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        match *self {
            Kernel::Sinusoidal => -(2.0 * std::f64::consts::PI * (a - b)).cos(),
            Kernel::UniformAttachment => 1.0 - a.max(b),
            Kernel::RankOne { a: w } => w * rank_one_v(a) * rank_one_v(b),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Sinusoidal => "sinusoidal",
            Kernel::UniformAttachment => "uniform_attachment",
            Kernel::RankOne { .. } => "rank_one",
        }
    }
}

/// The rank-one kernel's profile `v(α) = 1/(√2 (α+1/2)^{1/4})`.
pub fn rank_one_v(a: f64) -> f64 {
    1.0 / (std::f64::consts::SQRT_2 * (a + 0.5).powf(0.25))
}

/// `‖v‖₂²` for the rank-one profile: `√(3/2) - √(1/2)`.
pub fn rank_one_v_norm_sq() -> f64 {
    (1.5f64).sqrt() - (0.5f64).sqrt()
}

/// `∫_a^b v` in closed form.
pub fn rank_one_v_integral(a: f64, b: f64) -> f64 {
    let antideriv = |x: f64| (4.0 / 3.0) / std::f64::consts::SQRT_2 * (x + 0.5).powf(0.75);
    antideriv(b) - antideriv(a)
}

/// A graphon in one of the three representations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Graphon {
    Analytic(Kernel),
    FiniteRank { terms: Vec<(f64, EigenFunction)> },
    Step(StepGraphon),
}

/// Step graphon from a symmetric adjacency matrix with entries in [-1,1],
/// together with its partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepGraphon {
    n: usize,
    /// Row-major `n×n` cell values.
    matrix: Vec<f64>,
    grid: PartitionGrid,
}

impl StepGraphon {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, q: usize, l: usize) -> f64 {
        self.matrix[q * self.n + l]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn grid(&self) -> &PartitionGrid {
        &self.grid
    }
}

impl Graphon {
    /// Builds the step graphon `M^[N]` from a symmetric matrix (row-major).
    pub fn step_from_matrix(matrix: Vec<f64>, n: usize) -> Result<Graphon> {
        if n == 0 || matrix.len() != n * n {
            return Err(CoreError::validation(format!(
                "adjacency matrix must be {n}x{n}, got {} entries",
                matrix.len()
            )));
        }
        for q in 0..n {
            for l in 0..n {
                let v = matrix[q * n + l];
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(CoreError::validation(format!(
                        "adjacency entry ({q},{l}) = {v} outside [-1,1]"
                    )));
                }
                if v != matrix[l * n + q] {
                    return Err(CoreError::validation(format!(
                        "adjacency matrix asymmetric at ({q},{l})"
                    )));
                }
            }
        }
        let grid = PartitionGrid::with_default_resolution(n)?;
        Ok(Graphon::Step(StepGraphon { n, matrix, grid }))
    }

    /// Deterministic weight sampling: `m_ij = M((i-1)/N, (j-1)/N)` (1-based),
    /// i.e. node `i` sits at the left endpoint of its cell.
    pub fn sample_matrix(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(CoreError::validation("sample size must be at least 1"));
        }
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(i as f64 / n as f64, j as f64 / n as f64)?;
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        Ok(m)
    }

    /// Samples an `n`-node graph and wraps it as a step graphon.
    pub fn sample_step(&self, n: usize) -> Result<Graphon> {
        Graphon::step_from_matrix(self.sample_matrix(n)?, n)
    }

    /// Kernel value at `(a, b)`. Step graphons return the cell-constant value
    /// under the half-open cell convention.
    pub fn eval(&self, a: f64, b: f64) -> Result<f64> {
        for (name, x) in [("alpha", a), ("beta", b)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(CoreError::validation(format!("{name} = {x} outside [0,1]")));
            }
        }
        Ok(self.eval_unchecked(a, b))
    }

    pub(crate) fn eval_unchecked(&self, a: f64, b: f64) -> f64 {
        match self {
            Graphon::Analytic(k) => k.eval(a, b),
            Graphon::FiniteRank { terms } => terms
                .iter()
                .map(|(lam, f)| lam * f.eval(a) * f.eval(b))
                .sum(),
            Graphon::Step(s) => {
                let q = s.grid.cell_of(a);
                let l = s.grid.cell_of(b);
                s.value(q, l)
            }
        }
    }

    /// Kernel value with cell membership pinned by interior hint points, so
    /// cell-boundary quadrature nodes resolve to the cell being integrated.
    fn eval_hinted(&self, a: f64, b: f64, a_hint: f64, b_hint: f64) -> f64 {
        match self {
            Graphon::Step(s) => {
                let q = s.grid.cell_of(a_hint);
                let l = s.grid.cell_of(b_hint);
                s.value(q, l)
            }
            Graphon::FiniteRank { terms } => terms
                .iter()
                .map(|(lam, f)| lam * f.eval_hinted(a, a_hint) * f.eval_hinted(b, b_hint))
                .sum(),
            Graphon::Analytic(k) => k.eval(a, b),
        }
    }

    pub fn as_step(&self) -> Option<&StepGraphon> {
        match self {
            Graphon::Step(s) => Some(s),
            _ => None,
        }
    }

    /// Applies the integral operator to a grid function sampled on `grid`.
    ///
    /// Integration runs cell by cell so step kernels are treated exactly; the
    /// grid's partition must align with a step graphon's own cells.
    pub fn apply_operator(&self, grid: &PartitionGrid, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != grid.n_nodes() {
            return Err(CoreError::validation(format!(
                "grid function has {} values but the grid has {} nodes",
                phi.len(),
                grid.n_nodes()
            )));
        }
        self.check_grid_alignment(grid)?;
        let n_nodes = grid.n_nodes();
        let mut out = vec![0.0; n_nodes];
        for (i, out_i) in out.iter_mut().enumerate() {
            let a = grid.node(i);
            let mut acc = 0.0;
            for l in 0..grid.n_cells() {
                let (b_lo, b_hi) = grid.cell_bounds(l);
                let b_hint = 0.5 * (b_lo + b_hi);
                let (jlo, jhi) = grid.cell_nodes(l);
                let h = grid.spacing();
                for (j, phi_j) in phi.iter().enumerate().take(jhi + 1).skip(jlo) {
                    let w = if j == jlo || j == jhi { 0.5 * h } else { h };
                    acc += w * self.eval_hinted(a, grid.node(j), a, b_hint) * phi_j;
                }
            }
            *out_i = acc;
        }
        Ok(out)
    }

    fn check_grid_alignment(&self, grid: &PartitionGrid) -> Result<()> {
        if let Graphon::Step(s) = self {
            if !grid.n_cells().is_multiple_of(s.n) {
                return Err(CoreError::validation(format!(
                    "quadrature grid with {} cells does not align with step graphon N={}",
                    grid.n_cells(),
                    s.n
                )));
            }
        }
        Ok(())
    }
}

/// Sectional L1 distance `max_q N ∫₀¹ |∫_{P_q} (M₁ - M₂)(α,β) dα| dβ` on the
/// `n`-uniform partition.
///
/// The inner integral over the partition cell is evaluated before the
/// absolute value; swapping that order gives a different (larger) quantity.
/// `points_per_cell` controls the quadrature resolution relative to the
/// partition.
pub fn sectional_distance(
    m1: &Graphon,
    m2: &Graphon,
    n: usize,
    points_per_cell: usize,
) -> Result<f64> {
    let grid = PartitionGrid::new(n, points_per_cell)?;
    m1.check_grid_alignment(&grid)?;
    m2.check_grid_alignment(&grid)?;

    let diff = |q_hint: f64, b_hint: f64, a: f64, b: f64| {
        m1.eval_hinted(a, b, q_hint, b_hint) - m2.eval_hinted(a, b, q_hint, b_hint)
    };

    let mut worst: f64 = 0.0;
    for q in 0..n {
        let (a_lo, a_hi) = grid.cell_bounds(q);
        let a_hint = 0.5 * (a_lo + a_hi);
        // ∫₀¹ |inner_q(β)| dβ, integrated cell by cell in β.
        let outer = grid.integrate_cellwise(|l, b| {
            let (b_lo, b_hi) = grid.cell_bounds(l);
            let b_hint = 0.5 * (b_lo + b_hi);
            grid.integrate_cell(q, |a| diff(a_hint, b_hint, a, b)).abs()
        });
        worst = worst.max(n as f64 * outer);
    }
    Ok(worst)
}

/// Sectional L1 error `E_N = max_q N·‖(M - M^[N]) 1_{P_q}‖₁` of a graphon
/// against a step graphon on the step graphon's own partition.
pub fn sectional_l1_error(m: &Graphon, m_step: &Graphon, points_per_cell: usize) -> Result<f64> {
    let step = m_step
        .as_step()
        .ok_or_else(|| CoreError::validation("second argument must be a step graphon"))?;
    sectional_distance(m, m_step, step.n(), points_per_cell)
}

/// The deliberately wrong-ordered variant `max_q N ∬_{P_q×[0,1]} |M - M^[N]|`
/// (absolute value inside both integrals). Kept for tests demonstrating that
/// the integration order in [`sectional_l1_error`] matters.
#[doc(hidden)]
pub fn sectional_l1_error_wrong_order(
    m: &Graphon,
    m_step: &Graphon,
    points_per_cell: usize,
) -> Result<f64> {
    let step = m_step
        .as_step()
        .ok_or_else(|| CoreError::validation("second argument must be a step graphon"))?;
    let n = step.n();
    let grid = PartitionGrid::new(n, points_per_cell)?;
    let mut worst: f64 = 0.0;
    for q in 0..n {
        let (a_lo, a_hi) = grid.cell_bounds(q);
        let a_hint = 0.5 * (a_lo + a_hi);
        let outer = grid.integrate_cellwise(|l, b| {
            let (b_lo, b_hi) = grid.cell_bounds(l);
            let b_hint = 0.5 * (b_lo + b_hi);
            grid.integrate_cell(q, |a| {
                (m.eval_hinted(a, b, a_hint, b_hint) - m_step.eval_hinted(a, b, a_hint, b_hint))
                    .abs()
            })
        });
        worst = worst.max(n as f64 * outer);
    }
    Ok(worst)
}

/// Initial-state mean profile `μ(α) = E x₀^α` together with its step
/// projection `μ^[N]` (per-node means).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanProfile {
    profile: MuProfile,
    per_node: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuProfile {
    Constant {
        value: f64,
    },
    Linear {
        intercept: f64,
        slope: f64,
    },
    /// The profile *is* the step function given by these per-node means.
    PerNode {
        values: Vec<f64>,
    },
}

impl MuProfile {
    pub fn eval(&self, a: f64) -> f64 {
        match self {
            MuProfile::Constant { value } => *value,
            MuProfile::Linear { intercept, slope } => intercept + slope * a,
            MuProfile::PerNode { values } => {
                let n = values.len();
                let q = ((a * n as f64).floor() as usize).min(n - 1);
                values[q]
            }
        }
    }

    /// Exact cell mean `N ∫_{P_q} μ` (zero-based cell).
    fn cell_mean(&self, n: usize, q: usize) -> f64 {
        match self {
            MuProfile::Constant { value } => *value,
            MuProfile::Linear { intercept, slope } => {
                let mid = (q as f64 + 0.5) / n as f64;
                intercept + slope * mid
            }
            MuProfile::PerNode { values } => values[q],
        }
    }
}

impl MeanProfile {
    /// Projects a profile onto the `n`-node partition: `μ_q = N ∫_{P_q} μ`.
    pub fn project(profile: MuProfile, n: usize) -> Result<MeanProfile> {
        if n == 0 {
            return Err(CoreError::validation(
                "mean profile needs at least one node",
            ));
        }
        if let MuProfile::PerNode { values } = &profile {
            if values.len() != n {
                return Err(CoreError::validation(format!(
                    "per-node profile has {} entries, expected {n}",
                    values.len()
                )));
            }
        }
        let per_node = (0..n).map(|q| profile.cell_mean(n, q)).collect();
        Ok(MeanProfile { profile, per_node })
    }

    pub fn eval(&self, a: f64) -> f64 {
        self.profile.eval(a)
    }

    pub fn profile(&self) -> &MuProfile {
        &self.profile
    }

    /// Per-node means `[μ_1, …, μ_N]`.
    pub fn per_node(&self) -> &[f64] {
        &self.per_node
    }

    pub fn n(&self) -> usize {
        self.per_node.len()
    }

    /// Declared bound `C_μ = sup |μ|`.
    pub fn sup_bound(&self) -> f64 {
        match &self.profile {
            MuProfile::Constant { value } => value.abs(),
            MuProfile::Linear { intercept, slope } => {
                (intercept.abs()).max((intercept + slope).abs())
            }
            MuProfile::PerNode { values } => values.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

/// Mean-profile sampling error `E_N' = ∫₀¹ |μ^[N](α) - μ(α)| dα`.
pub fn mean_l1_error(mu: &MeanProfile, points_per_cell: usize) -> Result<f64> {
    let grid = PartitionGrid::new(mu.n(), points_per_cell)?;
    Ok(grid.integrate_cellwise(|q, a| (mu.per_node[q] - mu.eval(a)).abs()))
}

/// Certified lower bound on the cut norm `‖M‖_□ = sup_{S,T} |∬_{S×T} M|`.
///
/// The supremum is restricted to unions of cells of a uniform grid at the
/// given resolution. Up to 16 cells every union is enumerated (with the
/// optimal partner set chosen by column-sum signs, which is exact at fixed
/// `S`); above that a greedy sign-split alternation runs instead. Either way
/// the result is a value attained by some measurable pair, hence a genuine
/// lower bound up to block-quadrature error. Diagnostic only: the exact cut
/// norm is NP-hard in general.
pub fn cut_norm_lower_bound(g: &Graphon, resolution: usize) -> Result<f64> {
    if resolution == 0 {
        return Err(CoreError::validation(
            "cut norm resolution must be at least 1",
        ));
    }
    let blocks = block_integrals(g, resolution);
    let r = resolution;

    let score_for_rows = |rows: &[bool]| -> f64 {
        // With S fixed, the best T takes every column whose partial sum is
        // positive (or every negative one for the minus side).
        let mut pos = 0.0;
        let mut neg = 0.0;
        for j in 0..r {
            let col: f64 = (0..r).filter(|&i| rows[i]).map(|i| blocks[i * r + j]).sum();
            if col > 0.0 {
                pos += col;
            } else {
                neg += col;
            }
        }
        pos.max(-neg)
    };

    let mut best: f64 = 0.0;
    if r <= 16 {
        let mut rows = vec![false; r];
        for mask in 0u32..(1u32 << r) {
            for (i, slot) in rows.iter_mut().enumerate() {
                *slot = mask & (1 << i) != 0;
            }
            best = best.max(score_for_rows(&rows));
        }
    } else {
        // Greedy alternation from sign-split seeds.
        let row_sums: Vec<f64> = (0..r)
            .map(|i| (0..r).map(|j| blocks[i * r + j]).sum())
            .collect();
        let seeds: Vec<Vec<bool>> = vec![
            vec![true; r],
            row_sums.iter().map(|&s| s > 0.0).collect(),
            row_sums.iter().map(|&s| s < 0.0).collect(),
        ];
        for mut rows in seeds {
            for _ in 0..r {
                let cols: Vec<f64> = (0..r)
                    .map(|j| (0..r).filter(|&i| rows[i]).map(|i| blocks[i * r + j]).sum())
                    .collect();
                best = best.max(score_for_rows(&rows));
                // Re-optimize rows against the positive-column selection.
                let tsel: Vec<bool> = cols.iter().map(|&c| c > 0.0).collect();
                let new_rows: Vec<bool> = (0..r)
                    .map(|i| {
                        let s: f64 = (0..r).filter(|&j| tsel[j]).map(|j| blocks[i * r + j]).sum();
                        s > 0.0
                    })
                    .collect();
                if new_rows == rows {
                    break;
                }
                rows = new_rows;
            }
            best = best.max(score_for_rows(&rows));
        }
    }
    Ok(best)
}

/// `∬ |M|` by block midpoint quadrature; dominates the cut norm.
pub fn l1_norm(g: &Graphon, resolution: usize) -> f64 {
    let sub = 8;
    let h = 1.0 / (resolution * sub) as f64;
    let mut acc = 0.0;
    for i in 0..resolution * sub {
        let a = (i as f64 + 0.5) * h;
        for j in 0..resolution * sub {
            let b = (j as f64 + 0.5) * h;
            acc += g.eval_unchecked(a, b).abs() * h * h;
        }
    }
    acc
}

/// `∬_{block(i)×block(j)} M` for every pair of cells of the uniform
/// `resolution`-grid, by midpoint quadrature with 8 interior samples per axis
/// (midpoints never touch cell boundaries, so step kernels pose no ambiguity).
fn block_integrals(g: &Graphon, resolution: usize) -> Vec<f64> {
    let sub = 8;
    let fine = resolution * sub;
    let h = 1.0 / fine as f64;
    let mut blocks = vec![0.0; resolution * resolution];
    for fi in 0..fine {
        let a = (fi as f64 + 0.5) * h;
        for fj in 0..fine {
            let b = (fj as f64 + 0.5) * h;
            blocks[(fi / sub) * resolution + (fj / sub)] += g.eval_unchecked(a, b) * h * h;
        }
    }
    blocks
}

// ───────────────────────── adjacency matrix CSV ─────────────────────────

/// Writes an adjacency matrix as CSV with the versioned header line
/// `# gmfg-adjacency v1, N=<N>`.
pub fn save_adjacency_csv(path: &Path, matrix: &[f64], n: usize) -> Result<()> {
    if matrix.len() != n * n {
        return Err(CoreError::validation("matrix size mismatch"));
    }
    let mut out = String::new();
    writeln!(out, "# gmfg-adjacency v1, N={n}").expect("string write");
    for q in 0..n {
        let row: Vec<String> = (0..n).map(|l| format!("{}", matrix[q * n + l])).collect();
        writeln!(out, "{}", row.join(",")).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads an adjacency matrix saved by [`save_adjacency_csv`] and validates it.
pub fn load_adjacency_csv(path: &Path) -> Result<Graphon> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::validation("empty adjacency file"))?;
    let n: usize = header
        .strip_prefix("# gmfg-adjacency v1, N=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| {
            CoreError::validation(format!(
                "bad adjacency header {header:?}; expected '# gmfg-adjacency v1, N=<N>'"
            ))
        })?;
    let mut matrix = Vec::with_capacity(n * n);
    for (row_idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    CoreError::validation(format!("bad number {tok:?} in row {}", row_idx + 1))
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != n {
            return Err(CoreError::validation(format!(
                "row {} has {} entries, expected {n}",
                row_idx + 1,
                row.len()
            )));
        }
        matrix.extend(row);
    }
    if matrix.len() != n * n {
        return Err(CoreError::validation(format!(
            "adjacency file has {} rows of data, expected {n}",
            matrix.len() / n
        )));
    }
    Graphon::step_from_matrix(matrix, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sinusoidal() -> Graphon {
        Graphon::Analytic(Kernel::Sinusoidal)
    }

    fn m2_cross() -> Graphon {
        Graphon::step_from_matrix(vec![0.0, 1.0, 1.0, 0.0], 2).unwrap()
    }

    #[test]
    fn eval_named_kernels() {
        assert_abs_diff_eq!(sinusoidal().eval(0.0, 0.25).unwrap(), 0.0, epsilon = 1e-15);
        let ua = Graphon::Analytic(Kernel::UniformAttachment);
        assert_abs_diff_eq!(ua.eval(0.25, 0.5).unwrap(), 0.5);
        assert_abs_diff_eq!(m2_cross().eval(0.1, 0.9).unwrap(), 1.0);
        assert!(sinusoidal().eval(-0.1, 0.5).is_err());
        assert!(sinusoidal().eval(0.5, 1.5).is_err());
    }

    #[test]
    fn step_from_matrix_validates() {
        assert!(Graphon::step_from_matrix(vec![0.0, 1.0, 0.5, 0.0], 2).is_err()); // asymmetric
        assert!(Graphon::step_from_matrix(vec![0.0, 2.0, 2.0, 0.0], 2).is_err()); // out of range
        assert!(Graphon::step_from_matrix(vec![0.0; 3], 2).is_err()); // size

        let zero = Graphon::step_from_matrix(vec![0.0; 9], 3).unwrap();
        for &(a, b) in &[(0.0, 0.0), (0.4, 0.9), (1.0, 1.0)] {
            assert_eq!(zero.eval(a, b).unwrap(), 0.0);
        }
        // different halves ↔ weight 1
        let g = m2_cross();
        assert_eq!(g.eval(0.2, 0.3).unwrap(), 0.0);
        assert_eq!(g.eval(0.2, 0.7).unwrap(), 1.0);
    }

    #[test]
    fn sampling_matches_kernel_at_left_endpoints() {
        assert_eq!(sinusoidal().sample_matrix(1).unwrap(), vec![-1.0]);

        let ua = Graphon::Analytic(Kernel::UniformAttachment);
        let m = ua.sample_matrix(2).unwrap();
        assert_eq!(m, vec![1.0, 0.5, 0.5, 0.5]);

        let m4 = sinusoidal().sample_matrix(4).unwrap();
        // 1-based (1,3): -cos(2π·(0-2)/4) = -cos(π) = 1
        assert_abs_diff_eq!(m4[0 * 4 + 2], 1.0, epsilon = 1e-15);

        // sampled step graphon stores the same cell values
        let step = sinusoidal().sample_step(4).unwrap();
        assert_abs_diff_eq!(step.eval(0.1, 0.6).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn operator_annihilates_zero_and_reproduces_eigenfunctions() {
        let grid = PartitionGrid::new(4, 8).unwrap();
        let zero = vec![0.0; grid.n_nodes()];
        let out = sinusoidal().apply_operator(&grid, &zero).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        // √2 cos(2πβ) is an eigenfunction with eigenvalue -1/2.
        let phi: Vec<f64> = grid
            .nodes()
            .map(|a| std::f64::consts::SQRT_2 * (2.0 * std::f64::consts::PI * a).cos())
            .collect();
        let out = sinusoidal().apply_operator(&grid, &phi).unwrap();
        for (o, p) in out.iter().zip(&phi) {
            assert_abs_diff_eq!(*o, -0.5 * p, epsilon = 2e-3);
        }
    }

    #[test]
    fn operator_on_step_kernel_integrates_indicator() {
        // M_2 = [[0,1],[1,0]], φ = 1_{[0,1/2)}: (Mφ) = 1/2 on [1/2,1], 0 on [0,1/2).
        let g = m2_cross();
        for m in [8usize, 64] {
            let grid = PartitionGrid::new(2, m).unwrap();
            let phi: Vec<f64> = grid
                .nodes()
                .map(|a| if a < 0.5 { 1.0 } else { 0.0 })
                .collect();
            let out = g.apply_operator(&grid, &phi).unwrap();
            let h = grid.spacing();
            for (i, &v) in out.iter().enumerate() {
                let a = grid.node(i);
                // trapezoid loses h/2 at the indicator's jump, nothing more
                if a < 0.5 {
                    assert_abs_diff_eq!(v, 0.0, epsilon = 1e-14);
                } else {
                    assert_abs_diff_eq!(v, 0.5, epsilon = 0.5 * h + 1e-14);
                }
            }
            // constant on each half
            let mid = grid.n_nodes() / 2;
            assert_abs_diff_eq!(out[mid + 1], out[grid.n_nodes() - 1], epsilon = 1e-14);
        }
    }

    #[test]
    fn operator_is_linear() {
        let grid = PartitionGrid::new(3, 8).unwrap();
        let g = Graphon::Analytic(Kernel::UniformAttachment);
        let phi: Vec<f64> = grid.nodes().map(|a| (5.0 * a).sin()).collect();
        let psi: Vec<f64> = grid.nodes().map(|a| a * a - 0.3).collect();
        let combo: Vec<f64> = phi
            .iter()
            .zip(&psi)
            .map(|(p, s)| 2.5 * p - 1.25 * s)
            .collect();
        let op_combo = g.apply_operator(&grid, &combo).unwrap();
        let op_phi = g.apply_operator(&grid, &phi).unwrap();
        let op_psi = g.apply_operator(&grid, &psi).unwrap();
        for i in 0..grid.n_nodes() {
            assert_abs_diff_eq!(
                op_combo[i],
                2.5 * op_phi[i] - 1.25 * op_psi[i],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn sectional_error_vanishes_on_itself() {
        let step = sinusoidal().sample_step(8).unwrap();
        let e = sectional_l1_error(&step, &step, 8).unwrap();
        assert_abs_diff_eq!(e, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn sectional_error_sinusoidal_bound_and_oracle() {
        let m = sinusoidal();
        // fine-quadrature oracle value at N=16 (m=64), frozen
        let step16 = m.sample_step(16).unwrap();
        let e16 = sectional_l1_error(&m, &step16, 64).unwrap();
        assert!(e16 <= 4.0 * std::f64::consts::PI / 16.0);
        assert_abs_diff_eq!(e16, 0.062780, epsilon = 5e-4);

        let step64 = m.sample_step(64).unwrap();
        let e64 = sectional_l1_error(&m, &step64, 64).unwrap();
        assert!(e64 <= 4.0 * std::f64::consts::PI / 64.0);
        assert!(e64 <= e16);

        // default resolution agrees with the fine oracle to ~1%
        let e16_default = sectional_l1_error(&m, &step16, 8).unwrap();
        assert!((e16_default - e16).abs() / e16 < 0.02);
    }

    #[test]
    fn sectional_error_order_matters() {
        // abs-inside integration is strictly larger for the sinusoidal case
        let m = sinusoidal();
        let step = m.sample_step(16).unwrap();
        let ordered = sectional_l1_error(&m, &step, 8).unwrap();
        let wrong = sectional_l1_error_wrong_order(&m, &step, 8).unwrap();
        assert!(
            wrong > 1.2 * ordered,
            "expected the wrong-order value to dominate: {wrong} vs {ordered}"
        );
    }

    #[test]
    fn mean_profile_errors() {
        let ones = MeanProfile::project(MuProfile::Constant { value: 1.0 }, 8).unwrap();
        assert_abs_diff_eq!(mean_l1_error(&ones, 8).unwrap(), 0.0, epsilon = 1e-15);

        // μ(α)=α against its N=2 cell means {1/4, 3/4}: error 1/8
        let lin = MeanProfile::project(
            MuProfile::Linear {
                intercept: 0.0,
                slope: 1.0,
            },
            2,
        )
        .unwrap();
        assert_eq!(lin.per_node(), &[0.25, 0.75]);
        assert_abs_diff_eq!(mean_l1_error(&lin, 8).unwrap(), 0.125, epsilon = 1e-12);

        let c = MeanProfile::project(MuProfile::Constant { value: -0.7 }, 5).unwrap();
        assert_abs_diff_eq!(mean_l1_error(&c, 8).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.sup_bound(), 0.7);
    }

    #[test]
    fn cut_norm_bound_basics() {
        let zero = Graphon::step_from_matrix(vec![0.0; 4], 2).unwrap();
        assert_eq!(cut_norm_lower_bound(&zero, 4).unwrap(), 0.0);

        let one = Graphon::step_from_matrix(vec![1.0], 1).unwrap();
        assert_abs_diff_eq!(cut_norm_lower_bound(&one, 4).unwrap(), 1.0, epsilon = 1e-12);

        // sinusoidal: must dominate the fixed rectangle [0,1/4]² whose integral
        // is -1/(2π²) (quadrature oracle hand-checkable in closed form)
        let s = sinusoidal();
        let rect = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::PI);
        let lb = cut_norm_lower_bound(&s, 4).unwrap();
        assert!(
            lb >= rect - 1e-6,
            "lb {lb} should exceed rectangle value {rect}"
        );
        // and stays below the L1 norm (same quadrature grid: exact inequality)
        assert!(lb <= l1_norm(&s, 4) + 1e-12);
    }

    #[test]
    fn cut_norm_greedy_path_stays_a_lower_bound() {
        let s = sinusoidal();
        let exhaustive = cut_norm_lower_bound(&s, 16).unwrap();
        let greedy = cut_norm_lower_bound(&s, 32).unwrap();
        assert!(greedy <= l1_norm(&s, 32) + 1e-12);
        // finer resolution should not lose much against the coarse exhaustive value
        assert!(greedy >= 0.9 * exhaustive);
    }

    #[test]
    fn adjacency_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adj.csv");
        let m = sinusoidal().sample_matrix(5).unwrap();
        save_adjacency_csv(&path, &m, 5).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# gmfg-adjacency v1, N=5\n"));
        let g = load_adjacency_csv(&path).unwrap();
        let s = g.as_step().unwrap();
        for (a, b) in m.iter().zip(s.matrix()) {
            assert_eq!(a, b);
        }

        std::fs::write(&path, "# wrong header\n0.0\n").unwrap();
        assert!(load_adjacency_csv(&path).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_graphon() -> impl Strategy<Value = Graphon> {
            prop_oneof![
                Just(Graphon::Analytic(Kernel::Sinusoidal)),
                Just(Graphon::Analytic(Kernel::UniformAttachment)),
                (-1.0f64..1.0).prop_map(|a| Graphon::Analytic(Kernel::RankOne { a })),
                (2usize..6).prop_map(|n| {
                    Graphon::Analytic(Kernel::Sinusoidal)
                        .sample_step(n)
                        .unwrap()
                }),
            ]
        }

        proptest! {
            #[test]
            fn symmetry(g in arb_graphon(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let ab = g.eval(a, b).unwrap();
                let ba = g.eval(b, a).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12);
            }

            #[test]
            fn range(g in arb_graphon(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let v = g.eval(a, b).unwrap();
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            }

            #[test]
            fn cut_norm_below_l1(g in arb_graphon()) {
                let lb = cut_norm_lower_bound(&g, 8).unwrap();
                prop_assert!(lb <= l1_norm(&g, 8) + 1e-12);
            }
        }
    }
}
