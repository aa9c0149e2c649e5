//! Quadrature grids: the uniform partition of the node interval `[0,1]` and the
//! uniform time grid on `[0,T]`.
//!
//! All spatial integrals in this crate run on a composite trapezoid grid whose
//! node count is an integer multiple `m` of the partition size `N`, so every
//! cell boundary is a grid node and cell-restricted integrals of piecewise
//! smooth integrands never straddle a discontinuity.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Default quadrature points per partition cell.
pub const DEFAULT_POINTS_PER_CELL: usize = 8;

/// The N-uniform partition of `[0,1]` together with a cell-aligned trapezoid rule.
///
/// Cells are `P_q = [(q-1)/N, q/N)` for `q < N` and `P_N = [(N-1)/N, 1]`.
/// The quadrature grid holds `m·N + 1` nodes; cell `q` owns the `m + 1` nodes
/// with indices `(q-1)·m ..= q·m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionGrid {
    n_cells: usize,
    points_per_cell: usize,
}

impl PartitionGrid {
    pub fn new(n_cells: usize, points_per_cell: usize) -> Result<Self> {
        if n_cells == 0 {
            return Err(CoreError::validation("partition needs at least one cell"));
        }
        if points_per_cell < 4 {
            return Err(CoreError::validation(
                "quadrature resolution must be at least 4 points per cell",
            ));
        }
        Ok(PartitionGrid {
            n_cells,
            points_per_cell,
        })
    }

    pub fn with_default_resolution(n_cells: usize) -> Result<Self> {
        Self::new(n_cells, DEFAULT_POINTS_PER_CELL)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn points_per_cell(&self) -> usize {
        self.points_per_cell
    }

    /// Total number of trapezoid nodes, `m·N + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_cells * self.points_per_cell + 1
    }

    /// Node spacing `1/(m·N)`.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.n_cells * self.points_per_cell) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(|i| self.node(i))
    }

    /// Trapezoid weight of node `i`; weights sum to 1.
    pub fn weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i == self.n_nodes() - 1 {
            0.5 * h
        } else {
            h
        }
    }

    /// Index of the cell containing `alpha` under the half-open convention
    /// (the last cell is closed at 1).
    pub fn cell_of(&self, alpha: f64) -> usize {
        let q = (alpha * self.n_cells as f64).floor() as usize;
        q.min(self.n_cells - 1)
    }

    /// Cell bounds `[(q)/N, (q+1)/N]` for zero-based cell index `q`.
    pub fn cell_bounds(&self, q: usize) -> (f64, f64) {
        let n = self.n_cells as f64;
        (q as f64 / n, (q + 1) as f64 / n)
    }

    /// Node index range `(first, last)` owned by cell `q` (inclusive; the
    /// boundary nodes are shared with neighbor cells).
    pub fn cell_nodes(&self, q: usize) -> (usize, usize) {
        (q * self.points_per_cell, (q + 1) * self.points_per_cell)
    }

    /// ∫₀¹ f by the composite trapezoid rule, sampling f at the grid nodes.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n_nodes() {
            acc += self.weight(i) * f(self.node(i));
        }
        acc
    }

    /// ∫_{P_q} f by the trapezoid rule over the nodes of cell `q`.
    pub fn integrate_cell(&self, q: usize, f: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi) = self.cell_nodes(q);
        let h = self.spacing();
        let mut acc = 0.5 * h * (f(self.node(lo)) + f(self.node(hi)));
        for i in lo + 1..hi {
            acc += h * f(self.node(i));
        }
        acc
    }

    /// ∫₀¹ f evaluated cell by cell, passing the owning cell index to the
    /// integrand. Discontinuities at cell boundaries are resolved in favor of
    /// the cell being integrated, which keeps step-function integrands exact.
    pub fn integrate_cellwise(&self, f: impl Fn(usize, f64) -> f64) -> f64 {
        (0..self.n_cells)
            .map(|q| self.integrate_cell(q, |a| f(q, a)))
            .sum()
    }
}

/// Uniform time grid on [0, T] with `steps` intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if horizon <= 0.0 || !horizon.is_finite() {
            return Err(CoreError::validation(
                "time horizon must be positive and finite",
            ));
        }
        if steps == 0 {
            return Err(CoreError::validation("time grid needs at least one step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// A grid on the same horizon with twice as many steps.
    pub fn refined(&self) -> TimeGrid {
        TimeGrid {
            horizon: self.horizon,
            steps: self.steps * 2,
        }
    }

    /// Trapezoid quadrature of a grid function over [0, T].
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        assert_eq!(
            values.len(),
            self.n_nodes(),
            "grid function length mismatch"
        );
        let dt = self.dt();
        let inner: f64 = values[1..self.steps].iter().sum();
        dt * (0.5 * values[0] + inner + 0.5 * values[self.steps])
    }
}
