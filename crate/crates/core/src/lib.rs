//! Structure-preserving training of continuous-depth stochastic residual
//! networks: the mean-field optimal-control problem is discretized as a
//! multisymplectic hydrodynamic system on a space-time grid and solved by
//! damped Newton iteration on the discrete Euler-Lagrange equations.
//!
//! Modules mirror the pipeline: `mesh` (grid + stencils), `density` (initial
//! and target densities), `lagrangian` (the discrete cell Lagrangian and its
//! derivatives), `solver` (residual assembly and Newton), `conservation`
//! (mass / energy / vorticity / multisymplectic diagnostics), `modified_eq`
//! (backward-error modified equations), `stability` (energy-Casimir bound and
//! the layer/node criterion), `transport` (sample push-forward), plus the CLI
//! plumbing (`config`, `checkpoint`).

pub mod checkpoint;
pub mod config;
pub mod conservation;
pub mod density;
pub mod dual;
pub mod error;
pub mod lagrangian;
pub mod linsolve;
pub mod mesh;
pub mod modified_eq;
pub mod solver;
pub mod stability;
pub mod transport;

pub use error::Error;

/// Floor applied to densities inside logs and divisions. Keeps the Fisher
/// term and KL integrands finite where a density underflows at box corners.
pub const DENSITY_FLOOR: f64 = 1e-12;
