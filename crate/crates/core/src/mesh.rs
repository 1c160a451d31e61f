//! Space-time grid and the staggered averaging / differencing stencils.
//!
//! Fields live at integer nodes (i, j, n); the integrator evaluates them at
//! half-integer locations by arithmetic means of the adjacent nodes, and
//! derivatives are centered differences of those means. Half-index values are
//! never stored — they are recomputed on demand so there is a single source
//! of truth for every stencil in the crate.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bc {
    /// Spatial axes wrap around; the default. Makes telescoping sums exact.
    Periodic,
    /// One-sided copy: stencil reads one step outside the grid clamp to the
    /// boundary node; anything further out is an error.
    Clamped,
}

/// The discrete base manifold: a uniform box in space crossed with [0, T].
///
/// Spatial nodes sit at `min + i*dx` for `i = 0..Nx` (under periodic bc the
/// node at `max` is identified with the one at `min`, so `dx = extent/Nx`);
/// time nodes at `n*dt` for `n = 0..=Nt`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    /// Spatial dimension, 1 or 2.
    pub dim: usize,
    /// Per-axis [min, max]; axis 1 is ignored when `dim == 1`.
    pub domain: [[f64; 2]; 2],
    /// Per-axis node count; `n_space[1] == 1` when `dim == 1`.
    pub n_space: [usize; 2],
    /// Time-slab count; states carry `n_time + 1` slices.
    pub n_time: usize,
    pub dx: [f64; 2],
    pub dt: f64,
    /// Noise amplitude of the stochastic layer dynamics.
    pub nu: f64,
    pub bc: Bc,
}

impl GridSpec {
    pub fn new_1d(
        domain: [f64; 2],
        nx: usize,
        nt: usize,
        t_end: f64,
        nu: f64,
        bc: Bc,
    ) -> Result<Self> {
        let spec = GridSpec {
            dim: 1,
            domain: [domain, [0.0, 1.0]],
            n_space: [nx, 1],
            n_time: nt,
            dx: [(domain[1] - domain[0]) / nx as f64, 1.0],
            dt: t_end / nt as f64,
            nu,
            bc,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn new_2d(
        domain: [[f64; 2]; 2],
        n_space: [usize; 2],
        nt: usize,
        t_end: f64,
        nu: f64,
        bc: Bc,
    ) -> Result<Self> {
        let spec = GridSpec {
            dim: 2,
            domain,
            n_space,
            n_time: nt,
            dx: [
                (domain[0][1] - domain[0][0]) / n_space[0] as f64,
                (domain[1][1] - domain[1][0]) / n_space[1] as f64,
            ],
            dt: t_end / nt as f64,
            nu,
            bc,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::InvalidGrid(format!("dim must be 1 or 2, got {}", self.dim)));
        }
        for k in 0..self.dim {
            if self.n_space[k] < 4 {
                return Err(Error::InvalidGrid(format!(
                    "n_space[{k}] = {} < 4",
                    self.n_space[k]
                )));
            }
            if !(self.dx[k] > 0.0) {
                return Err(Error::InvalidGrid(format!("dx[{k}] = {} <= 0", self.dx[k])));
            }
            let extent = self.domain[k][1] - self.domain[k][0];
            if (self.dx[k] * self.n_space[k] as f64 - extent).abs() > 1e-12 * extent.abs().max(1.0) {
                return Err(Error::InvalidGrid(format!(
                    "dx[{k}]*Nx[{k}] = {} does not match extent {extent}",
                    self.dx[k] * self.n_space[k] as f64
                )));
            }
        }
        if self.dim == 1 && self.n_space[1] != 1 {
            return Err(Error::InvalidGrid("1-D grid must have n_space[1] == 1".into()));
        }
        if self.n_time < 2 {
            return Err(Error::InvalidGrid(format!("n_time = {} < 2", self.n_time)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidGrid(format!("dt = {} <= 0", self.dt)));
        }
        if self.nu < 0.0 {
            return Err(Error::InvalidGrid(format!("nu = {} < 0", self.nu)));
        }
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        self.dt * self.n_time as f64
    }

    /// Coordinate of spatial node `i` on `axis`.
    pub fn x(&self, axis: usize, i: usize) -> f64 {
        self.domain[axis][0] + self.dx[axis] * i as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        self.dt * n as f64
    }

    /// Volume element of one space-time cell.
    pub fn cell_volume(&self) -> f64 {
        if self.dim == 2 {
            self.dx[0] * self.dx[1] * self.dt
        } else {
            self.dx[0] * self.dt
        }
    }

    /// Spatial quadrature weight of one node (uniform grid, periodic
    /// trapezoid = plain sum).
    pub fn node_volume(&self) -> f64 {
        if self.dim == 2 {
            self.dx[0] * self.dx[1]
        } else {
            self.dx[0]
        }
    }

    /// Allocate a node field of the right shape, zero-filled.
    pub fn zeros(&self) -> Array3<f64> {
        Array3::zeros([self.n_space[0], self.n_space[1], self.n_time + 1])
    }

    /// Resolve a possibly out-of-range spatial index according to the bc.
    pub fn wrap_space(&self, axis: usize, i: isize) -> Result<usize> {
        let n = self.n_space[axis] as isize;
        match self.bc {
            Bc::Periodic => Ok(i.rem_euclid(n) as usize),
            Bc::Clamped => {
                if i >= -1 && i <= n {
                    Ok(i.clamp(0, n - 1) as usize)
                } else {
                    Err(Error::BoundaryAccess {
                        i: if axis == 0 { i } else { 0 },
                        j: if axis == 1 { i } else { 0 },
                        n: 0,
                    })
                }
            }
        }
    }

    /// Time indices never wrap; valid range is `0..=n_time`.
    pub fn check_time(&self, n: isize) -> Result<usize> {
        if n >= 0 && n <= self.n_time as isize {
            Ok(n as usize)
        } else {
            Err(Error::BoundaryAccess { i: 0, j: 0, n })
        }
    }
}

/// Integer grid coordinates; `j` stays 0 on 1-D grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeIndex {
    pub i: usize,
    pub j: usize,
    pub n: usize,
}

/// One coordinate of a stencil location: either on a node or halfway between
/// two (`Mid(i)` reads as `i + 1/2`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pos {
    At(isize),
    Mid(isize),
}

impl Pos {
    fn expand(self) -> [isize; 2] {
        match self {
            Pos::At(i) => [i, i],
            Pos::Mid(i) => [i, i + 1],
        }
    }

    fn is_mid(self) -> bool {
        matches!(self, Pos::Mid(_))
    }
}

/// Stencil location (i, j, n); the j slot must be `At(0)` on 1-D grids.
pub type Loc = [Pos; 3];

pub const AXIS_X1: usize = 0;
pub const AXIS_X2: usize = 1;
pub const AXIS_T: usize = 2;

/// Arithmetic mean of the 2^k nodes adjacent to a k-fold half-index location.
/// Exact on affine fields; pure.
pub fn half_index_average(field: &Array3<f64>, grid: &GridSpec, at: Loc) -> Result<f64> {
    let [pi, pj, pn] = at;
    let mut sum = 0.0;
    let mut count = 0.0;
    for &ii in pi.expand().iter().take(if pi.is_mid() { 2 } else { 1 }) {
        for &jj in pj.expand().iter().take(if pj.is_mid() { 2 } else { 1 }) {
            for &nn in pn.expand().iter().take(if pn.is_mid() { 2 } else { 1 }) {
                let i = grid.wrap_space(0, ii)?;
                let j = if grid.dim == 2 { grid.wrap_space(1, jj)? } else { 0 };
                let n = grid.check_time(nn)?;
                sum += field[[i, j, n]];
                count += 1.0;
            }
        }
    }
    Ok(sum / count)
}

/// Centered difference of half-index averages along `axis`, e.g.
/// (phi_{i+1, j+1/2, n+1/2} - phi_{i, j+1/2, n+1/2}) / dx1 for a location
/// `[Mid(i), Mid(j), Mid(n)]` and `axis = AXIS_X1`. Second-order accurate at
/// the midpoint; exact on affine fields.
pub fn midpoint_derivative(
    field: &Array3<f64>,
    grid: &GridSpec,
    axis: usize,
    at: Loc,
) -> Result<f64> {
    let k = match at[axis] {
        Pos::Mid(k) => k,
        Pos::At(_) => {
            return Err(Error::InvalidGrid(
                "midpoint_derivative needs a half-index location on the derivative axis".into(),
            ))
        }
    };
    let mut hi = at;
    hi[axis] = Pos::At(k + 1);
    let mut lo = at;
    lo[axis] = Pos::At(k);
    let step = if axis == AXIS_T { grid.dt } else { grid.dx[axis] };
    Ok((half_index_average(field, grid, hi)? - half_index_average(field, grid, lo)?) / step)
}

/// Mean over the vertices of the space-time cell whose lowest corner is
/// `cell`: 8 corners in 2-D, 4 in 1-D. The "barred" variables of the
/// discrete Lagrangian.
pub fn pyramid_average(field: &Array3<f64>, grid: &GridSpec, cell: NodeIndex) -> Result<f64> {
    let at = if grid.dim == 2 {
        [
            Pos::Mid(cell.i as isize),
            Pos::Mid(cell.j as isize),
            Pos::Mid(cell.n as isize),
        ]
    } else {
        [Pos::Mid(cell.i as isize), Pos::At(0), Pos::Mid(cell.n as isize)]
    };
    half_index_average(field, grid, at)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1d() -> GridSpec {
        GridSpec::new_1d([-1.0, 1.0], 8, 4, 1.0, 0.5, Bc::Periodic).unwrap()
    }

    #[test]
    fn dx_matches_extent() {
        let g = grid_1d();
        assert!((g.dx[0] * 8.0 - 2.0).abs() < 1e-15);
        assert!((g.t_end() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(GridSpec::new_1d([-1.0, 1.0], 3, 4, 1.0, 0.5, Bc::Periodic).is_err());
        assert!(GridSpec::new_1d([-1.0, 1.0], 8, 1, 1.0, 0.5, Bc::Periodic).is_err());
    }

    #[test]
    fn half_average_of_constant_is_constant() {
        let g = grid_1d();
        let mut f = g.zeros();
        f.fill(3.25);
        let v =
            half_index_average(&f, &g, [Pos::Mid(2), Pos::At(0), Pos::Mid(1)]).unwrap();
        assert_eq!(v, 3.25);
    }

    #[test]
    fn half_average_is_midpoint_on_linear_field() {
        let g = grid_1d();
        let mut f = g.zeros();
        for i in 0..8 {
            for n in 0..=4 {
                f[[i, 0, n]] = g.x(0, i);
            }
        }
        let v = half_index_average(&f, &g, [Pos::Mid(3), Pos::At(0), Pos::At(2)]).unwrap();
        assert!((v - (g.x(0, 3) + g.x(0, 4)) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn clamped_bc_copies_one_step_and_rejects_two() {
        let g = GridSpec::new_1d([-1.0, 1.0], 8, 4, 1.0, 0.5, Bc::Clamped).unwrap();
        assert_eq!(g.wrap_space(0, -1).unwrap(), 0);
        assert_eq!(g.wrap_space(0, 8).unwrap(), 7);
        assert!(g.wrap_space(0, -2).is_err());
        assert!(g.check_time(5).is_err());
    }

    #[test]
    fn derivative_needs_half_index_on_axis() {
        let g = grid_1d();
        let f = g.zeros();
        assert!(midpoint_derivative(&f, &g, AXIS_X1, [Pos::At(1), Pos::At(0), Pos::Mid(1)])
            .is_err());
    }
}
