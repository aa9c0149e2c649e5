//! Linear-quadratic stochastic games on dense weighted graphs, solved
//! through their graphon limit, under idiosyncratic and common noise.
//!
//! A large population of agents sits on the nodes of a dense weighted graph.
//! Each agent's scalar state follows
//!
//! ```text
//! dx_t^i = (A x_t^i + B u_t^i + D z_t^i) dt + Σ dw_t^i + Σ₀ dW_t^0,
//! ```
//!
//! where `z^i` is the graph-weighted average of cluster state means and `W^0`
//! is a Brownian motion common to everyone. Each agent minimizes a quadratic
//! cost tracking `ν^i = H(z^i + η)`. As the node count and cluster sizes grow,
//! the network converges to a graphon `M`, and the equilibrium of the limit
//! game decomposes along the eigenpairs of the graphon operator: one scalar
//! Riccati equation plus, per nonzero eigenvalue, a small forward-backward
//! system that an affine ansatz `g^l = K^l z^l + Φ^l` reduces to ODEs.
//!
//! The crate solves the limit game, assembles the decentralized feedback
//! strategies for a finite population, and verifies by Monte Carlo that those
//! strategies form an ε-Nash equilibrium with ε shrinking like `δ_K^{1/2}`,
//! where `δ_K = E_N² + (E_N')² + 1/min|C_l|` combines graphon sampling error,
//! mean-profile sampling error, and within-cluster averaging error.
//!
//! Module map:
//! - [`graphon`]: kernels, step graphons, the integral operator, sectional norms;
//! - [`spectral`]: eigenpairs (closed-form and numeric) and spectral diagnostics;
//! - [`limit`]: the Riccati/mode ODE solves, mode SDE simulation, strategy fields;
//! - [`popsim`]: finite-population closed-loop Monte Carlo, costs, deviations, ε̂;
//! - [`convergence`]: δ_K ladders and empirical rate fits;
//! - [`scenario`]: TOML scenario schema shared by the CLI and tests;
//! - [`output`]: JSON/CSV emission with a versioned schema.

pub mod convergence;
pub mod error;
pub mod graphon;
pub mod grid;
pub mod limit;
pub mod noise;
pub mod output;
pub mod popsim;
pub mod scenario;
pub mod spectral;

pub use error::{CoreError, Result};
