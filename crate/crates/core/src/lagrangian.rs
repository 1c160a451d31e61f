//! The discrete cell Lagrangian and action. Everything downstream (Newton
//! residuals, Jacobians, conservation checks) goes through the two kernels
//! here, so the staggering conventions are fixed in exactly one place:
//!
//! - velocity components live on half-face points: `w1` at (i, j+1/2, n+1/2),
//!   `w2` at (i+1/2, j, n+1/2); in 1-D `w` sits at (i, n+1/2);
//! - the multiplier is a cell average at (i+1/2, j+1/2, n+1/2);
//! - density lives on nodes, and every density the cell needs (face values,
//!   difference quotients, the cell mean) is built from its 2^(dim+1) corner
//!   values by half-index averaging.

use crate::dual::{Scal, D1, D2};
use crate::error::Result;
use crate::mesh::{half_index_average, GridSpec, NodeIndex, Pos};
use crate::solver::StateField;

pub const N1: usize = 7;
pub const N2: usize = 13;

/// Everything one space-time cell contributes to the action, gathered from
/// nodal fields. `w1_face` holds the two x1-faces (low, high); `w2_face` the
/// two x2-faces; `rho` the corner densities indexed `di + 2*dj + 4*dn`
/// (`di + 2*dn` in 1-D).
#[derive(Clone, Copy, Debug)]
pub struct CellValues {
    pub dim: usize,
    pub w1_face: [f64; 2],
    pub w2_face: [f64; 2],
    pub lambda_bar: f64,
    pub rho: [f64; 8],
}

impl CellValues {
    /// Gather the cell locals for cell (i, j, n) from node-based fields.
    pub fn from_state(state: &StateField, grid: &GridSpec, cell: NodeIndex) -> Result<CellValues> {
        let (i, j, n) = (cell.i, cell.j, cell.n);
        let ii = i as isize;
        let jj = j as isize;
        let nn = n as isize;
        let mut rho = [0.0; 8];
        if grid.dim == 1 {
            for di in 0..2usize {
                for dn in 0..2usize {
                    rho[di + 2 * dn] = half_index_average(
                        &state.rho,
                        grid,
                        [Pos::At(ii + di as isize), Pos::At(0), Pos::At(nn + dn as isize)],
                    )?;
                }
            }
            Ok(CellValues {
                dim: 1,
                w1_face: [
                    half_index_average(&state.w1, grid, [Pos::At(ii), Pos::At(0), Pos::Mid(nn)])?,
                    half_index_average(&state.w1, grid, [Pos::At(ii + 1), Pos::At(0), Pos::Mid(nn)])?,
                ],
                w2_face: [0.0; 2],
                lambda_bar: half_index_average(
                    &state.lambda,
                    grid,
                    [Pos::Mid(ii), Pos::At(0), Pos::Mid(nn)],
                )?,
                rho,
            })
        } else {
            let w2 = state.w2.as_ref().expect("2-D state carries w2");
            for di in 0..2usize {
                for dj in 0..2usize {
                    for dn in 0..2usize {
                        rho[di + 2 * dj + 4 * dn] = half_index_average(
                            &state.rho,
                            grid,
                            [
                                Pos::At(ii + di as isize),
                                Pos::At(jj + dj as isize),
                                Pos::At(nn + dn as isize),
                            ],
                        )?;
                    }
                }
            }
            Ok(CellValues {
                dim: 2,
                w1_face: [
                    half_index_average(&state.w1, grid, [Pos::At(ii), Pos::Mid(jj), Pos::Mid(nn)])?,
                    half_index_average(&state.w1, grid, [Pos::At(ii + 1), Pos::Mid(jj), Pos::Mid(nn)])?,
                ],
                w2_face: [
                    half_index_average(w2, grid, [Pos::Mid(ii), Pos::At(jj), Pos::Mid(nn)])?,
                    half_index_average(w2, grid, [Pos::Mid(ii), Pos::At(jj + 1), Pos::Mid(nn)])?,
                ],
                lambda_bar: half_index_average(
                    &state.lambda,
                    grid,
                    [Pos::Mid(ii), Pos::Mid(jj), Pos::Mid(nn)],
                )?,
                rho,
            })
        }
    }

    pub fn locals_1d(&self) -> [f64; N1] {
        [
            self.w1_face[0],
            self.w1_face[1],
            self.lambda_bar,
            self.rho[0],
            self.rho[1],
            self.rho[2],
            self.rho[3],
        ]
    }

    pub fn locals_2d(&self) -> [f64; N2] {
        [
            self.w1_face[0],
            self.w1_face[1],
            self.w2_face[0],
            self.w2_face[1],
            self.lambda_bar,
            self.rho[0],
            self.rho[1],
            self.rho[2],
            self.rho[3],
            self.rho[4],
            self.rho[5],
            self.rho[6],
            self.rho[7],
        ]
    }
}

/// 1-D cell kernel over locals [a, b, m, r00, r10, r01, r11]: a, b are the
/// low/high velocity faces, m the multiplier, r(di,dn) the density corners.
pub fn lhat_1d<T: Scal>(z: &[T; N1], dx: f64, dt: f64, nu: f64) -> T {
    let [a, b, m, r00, r10, r01, r11] = *z;
    let rho_xl = (r00 + r01).scale(0.5);
    let rho_xr = (r10 + r11).scale(0.5);
    let rho_tb = (r00 + r10).scale(0.5);
    let rho_tt = (r01 + r11).scale(0.5);
    let rho_bar = (r00 + r10 + r01 + r11).scale(0.25);
    let w_bar = (a + b).scale(0.5);
    let d_x = (rho_xr - rho_xl).scale(1.0 / dx);
    let cont =
        (rho_tt - rho_tb).scale(1.0 / dt) + (rho_xr * b - rho_xl * a).scale(1.0 / dx);
    (rho_bar * w_bar * w_bar).scale(0.5)
        + (d_x * w_bar).scale(0.5 * nu * nu)
        + (d_x * d_x / rho_bar).scale(nu.powi(4) / 8.0)
        + m * cont
}

/// 2-D cell kernel over locals [a, b, c, d, m, r(di + 2 dj + 4 dn)...]:
/// a, b the x1-faces of w1; c, d the x2-faces of w2.
pub fn lhat_2d<T: Scal>(z: &[T; N2], dx1: f64, dx2: f64, dt: f64, nu: f64) -> T {
    let a = z[0];
    let b = z[1];
    let c = z[2];
    let d = z[3];
    let m = z[4];
    let r = &z[5..13];
    // Face densities: average the four corners sharing the face's integer
    // coordinate; the cell mean averages all eight.
    let rho_xl = (r[0] + r[2] + r[4] + r[6]).scale(0.25);
    let rho_xr = (r[1] + r[3] + r[5] + r[7]).scale(0.25);
    let rho_yb = (r[0] + r[1] + r[4] + r[5]).scale(0.25);
    let rho_yt = (r[2] + r[3] + r[6] + r[7]).scale(0.25);
    let rho_tb = (r[0] + r[1] + r[2] + r[3]).scale(0.25);
    let rho_tt = (r[4] + r[5] + r[6] + r[7]).scale(0.25);
    let rho_bar =
        (r[0] + r[1] + r[2] + r[3] + r[4] + r[5] + r[6] + r[7]).scale(0.125);
    let w1_bar = (a + b).scale(0.5);
    let w2_bar = (c + d).scale(0.5);
    let d_x1 = (rho_xr - rho_xl).scale(1.0 / dx1);
    let d_x2 = (rho_yt - rho_yb).scale(1.0 / dx2);
    let cont = (rho_tt - rho_tb).scale(1.0 / dt)
        + (rho_xr * b - rho_xl * a).scale(1.0 / dx1)
        + (rho_yt * d - rho_yb * c).scale(1.0 / dx2);
    (rho_bar * (w1_bar * w1_bar + w2_bar * w2_bar)).scale(0.5)
        + (d_x1 * w1_bar + d_x2 * w2_bar).scale(0.5 * nu * nu)
        + ((d_x1 * d_x1 + d_x2 * d_x2) / rho_bar).scale(nu.powi(4) / 8.0)
        + m * cont
}

pub fn lhat_value_1d(z: &[f64; N1], dx: f64, dt: f64, nu: f64) -> f64 {
    lhat_1d(z, dx, dt, nu)
}

pub fn lhat_grad_1d(z: &[f64; N1], dx: f64, dt: f64, nu: f64) -> (f64, [f64; N1]) {
    let mut d = [D1::<N1>::var(0, 0.0); N1];
    for (k, dk) in d.iter_mut().enumerate() {
        *dk = D1::var(k, z[k]);
    }
    let out = lhat_1d(&d, dx, dt, nu);
    (out.v, out.g)
}

#[allow(clippy::type_complexity)]
pub fn lhat_hess_1d(z: &[f64; N1], dx: f64, dt: f64, nu: f64) -> (f64, [f64; N1], [[f64; N1]; N1]) {
    let mut d = [D2::<N1>::var(0, 0.0); N1];
    for (k, dk) in d.iter_mut().enumerate() {
        *dk = D2::var(k, z[k]);
    }
    let out = lhat_1d(&d, dx, dt, nu);
    (out.v, out.g, out.h)
}

pub fn lhat_grad_2d(z: &[f64; N2], dx1: f64, dx2: f64, dt: f64, nu: f64) -> (f64, [f64; N2]) {
    let mut d = [D1::<N2>::var(0, 0.0); N2];
    for (k, dk) in d.iter_mut().enumerate() {
        *dk = D1::var(k, z[k]);
    }
    let out = lhat_2d(&d, dx1, dx2, dt, nu);
    (out.v, out.g)
}

#[allow(clippy::type_complexity)]
pub fn lhat_hess_2d(
    z: &[f64; N2],
    dx1: f64,
    dx2: f64,
    dt: f64,
    nu: f64,
) -> (f64, [f64; N2], [[f64; N2]; N2]) {
    let mut d = [D2::<N2>::var(0, 0.0); N2];
    for (k, dk) in d.iter_mut().enumerate() {
        *dk = D2::var(k, z[k]);
    }
    let out = lhat_2d(&d, dx1, dx2, dt, nu);
    (out.v, out.g, out.h)
}

/// Cell Lagrangian density (not yet multiplied by the cell volume).
pub fn discrete_lagrangian(cell: &CellValues, grid: &GridSpec) -> f64 {
    if cell.dim == 1 {
        lhat_1d(&cell.locals_1d(), grid.dx[0], grid.dt, grid.nu)
    } else {
        lhat_2d(&cell.locals_2d(), grid.dx[0], grid.dx[1], grid.dt, grid.nu)
    }
}

/// Full discrete action: sum over all space-time cells of the cell
/// Lagrangian times the cell volume. Summation order is a fixed nested loop
/// so the result is bit-stable.
pub fn discrete_action(state: &StateField, grid: &GridSpec) -> Result<f64> {
    let vol = grid.cell_volume();
    let mut s = 0.0;
    let nj = if grid.dim == 2 { grid.n_space[1] } else { 1 };
    for n in 0..grid.n_time {
        for i in 0..grid.n_space[0] {
            for j in 0..nj {
                let cell = CellValues::from_state(state, grid, NodeIndex { i, j, n })?;
                s += discrete_lagrangian(&cell, grid) * vol;
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HamiltonianValue {
    pub kinetic: f64,
    pub fisher: f64,
    pub total: f64,
}

/// Pointwise energy density H_S = rho |w|^2 / 2 + (nu^4/8) rho |grad log rho|^2.
pub fn hamiltonian_s(w: &[f64; 2], rho: f64, grad_log_rho: &[f64; 2], nu: f64, dim: usize) -> HamiltonianValue {
    let mut w2 = 0.0;
    let mut g2 = 0.0;
    for k in 0..dim {
        w2 += w[k] * w[k];
        g2 += grad_log_rho[k] * grad_log_rho[k];
    }
    let kinetic = 0.5 * rho * w2;
    let fisher = nu.powi(4) / 8.0 * rho * g2;
    HamiltonianValue { kinetic, fisher, total: kinetic + fisher }
}

/// Space-time quadrature of the control cost rho |w + (nu^2/2) grad log rho|^2 / 2
/// over nodes, trapezoidal in time. Gradients are centered differences.
pub fn cost_lagrangian(state: &StateField, grid: &GridSpec) -> f64 {
    let nu2h = 0.5 * grid.nu * grid.nu;
    let nj = if grid.dim == 2 { grid.n_space[1] } else { 1 };
    let mut total = 0.0;
    for n in 0..=grid.n_time {
        let tw = if n == 0 || n == grid.n_time { 0.5 } else { 1.0 };
        let mut slice = 0.0;
        for i in 0..grid.n_space[0] {
            for j in 0..nj {
                let rho = state.rho[[i, j, n]];
                let mut v2 = 0.0;
                for axis in 0..grid.dim {
                    let (ip, im) = if axis == 0 {
                        (
                            [grid.wrap_space(0, i as isize + 1).unwrap(), j, n],
                            [grid.wrap_space(0, i as isize - 1).unwrap(), j, n],
                        )
                    } else {
                        (
                            [i, grid.wrap_space(1, j as isize + 1).unwrap(), n],
                            [i, grid.wrap_space(1, j as isize - 1).unwrap(), n],
                        )
                    };
                    let dlog = (state.rho[ip].max(crate::DENSITY_FLOOR).ln()
                        - state.rho[im].max(crate::DENSITY_FLOOR).ln())
                        / (2.0 * grid.dx[axis]);
                    let w = if axis == 0 {
                        state.w1[[i, j, n]]
                    } else {
                        state.w2.as_ref().expect("2-D state carries w2")[[i, j, n]]
                    };
                    let v = w + nu2h * dlog;
                    v2 += v * v;
                }
                slice += 0.5 * rho * v2 * crate::density::node_weight(grid, i, j);
            }
        }
        total += slice * tw * grid.dt;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Bc;
    use crate::solver::StateField;
    use ndarray::Array3;

    fn rng_fill(a: &mut Array3<f64>, seed: &mut u64, lo: f64, hi: f64) {
        // splitmix64, good enough for test data and dependency-free here
        for v in a.iter_mut() {
            *seed = seed.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = *seed;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            let u = (z >> 11) as f64 / (1u64 << 53) as f64;
            *v = lo + (hi - lo) * u;
        }
    }

    fn random_state(grid: &GridSpec, seed: u64) -> StateField {
        let mut s = seed;
        let mut st = StateField::zeros(grid);
        rng_fill(&mut st.w1, &mut s, -0.7, 0.7);
        if let Some(w2) = st.w2.as_mut() {
            rng_fill(w2, &mut s, -0.7, 0.7);
        }
        rng_fill(&mut st.lambda, &mut s, -0.5, 0.5);
        rng_fill(&mut st.rho, &mut s, 0.5, 1.8);
        st
    }

    fn grid1(n: usize, nt: usize) -> GridSpec {
        GridSpec::new_1d([0.0, 1.0], n, nt, 0.5, 0.5, Bc::Periodic).unwrap()
    }

    #[test]
    fn kernel_gradient_and_hessian_match_finite_differences() {
        let (dx, dt, nu) = (0.17, 0.11, 0.6);
        let z1 = [0.3, -0.2, 0.45, 0.9, 1.1, 1.3, 0.8];
        let (v, g, h) = lhat_hess_1d(&z1, dx, dt, nu);
        assert_eq!(v, lhat_value_1d(&z1, dx, dt, nu));
        let step = 1e-6;
        for k in 0..N1 {
            let mut zp = z1;
            let mut zm = z1;
            zp[k] += step;
            zm[k] -= step;
            let fd = (lhat_value_1d(&zp, dx, dt, nu) - lhat_value_1d(&zm, dx, dt, nu))
                / (2.0 * step);
            assert!((g[k] - fd).abs() < 1e-8, "1d grad[{k}]");
            let (_, gp) = lhat_grad_1d(&zp, dx, dt, nu);
            let (_, gm) = lhat_grad_1d(&zm, dx, dt, nu);
            for l in 0..N1 {
                let fd2 = (gp[l] - gm[l]) / (2.0 * step);
                assert!((h[k][l] - fd2).abs() < 1e-7, "1d hess[{k}][{l}]");
            }
        }
        let z2 = [
            0.3, -0.2, 0.1, 0.4, 0.45, 0.9, 1.1, 1.3, 0.8, 1.0, 0.7, 1.2, 0.95,
        ];
        let (v2, g2, h2) = lhat_hess_2d(&z2, dx, 0.13, dt, nu);
        assert_eq!(v2, lhat_2d(&z2, dx, 0.13, dt, nu));
        for k in 0..N2 {
            let mut zp = z2;
            let mut zm = z2;
            zp[k] += step;
            zm[k] -= step;
            let fd = (lhat_2d(&zp, dx, 0.13, dt, nu) - lhat_2d(&zm, dx, 0.13, dt, nu))
                / (2.0 * step);
            assert!((g2[k] - fd).abs() < 1e-8, "2d grad[{k}]");
            let (_, gp) = lhat_grad_2d(&zp, dx, 0.13, dt, nu);
            let (_, gm) = lhat_grad_2d(&zm, dx, 0.13, dt, nu);
            for l in 0..N2 {
                let fd2 = (gp[l] - gm[l]) / (2.0 * step);
                assert!((h2[k][l] - fd2).abs() < 1e-7, "2d hess[{k}][{l}]");
            }
        }
    }

    #[test]
    fn kernel_matches_expanded_formula() {
        // Independent transcription of the 1-D cell Lagrangian written as
        // bare monomials, kept deliberately separate from the kernel.
        let (dx, dt, nu) = (0.23f64, 0.19f64, 0.7f64);
        let z = [0.31, -0.17, 0.53, 0.81, 1.21, 1.02, 0.64];
        let (a, b, m, r00, r10, r01, r11) = (z[0], z[1], z[2], z[3], z[4], z[5], z[6]);
        let rbar = 0.25 * (r00 + r10 + r01 + r11);
        let wbar = 0.5 * (a + b);
        let dxr = (0.5 * (r10 + r11) - 0.5 * (r00 + r01)) / dx;
        let want = 0.5 * rbar * wbar * wbar
            + 0.5 * nu * nu * dxr * wbar
            + nu.powi(4) / 8.0 * dxr * dxr / rbar
            + m * ((0.5 * (r01 + r11) - 0.5 * (r00 + r10)) / dt
                + (0.5 * (r10 + r11) * b - 0.5 * (r00 + r01) * a) / dx);
        let got = lhat_value_1d(&z, dx, dt, nu);
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn action_is_quadratic_in_velocity() {
        let grid = grid1(8, 5);
        let base = random_state(&grid, 11);
        let eval = |s: f64| {
            let mut st = base.clone();
            st.w1.mapv_inplace(|v| v * s);
            discrete_action(&st, &grid).unwrap()
        };
        let (g0, g1, g2, g3) = (eval(0.0), eval(1.0), eval(2.0), eval(3.0));
        let third = g3 - 3.0 * g2 + 3.0 * g1 - g0;
        assert!(third.abs() < 1e-12 * (1.0 + g1.abs()), "third difference {third}");
    }

    #[test]
    fn constant_multiplier_shift_sees_only_mass_defect() {
        let grid = grid1(8, 5);
        let base = random_state(&grid, 23);
        let s0 = discrete_action(&base, &grid).unwrap();
        let c = 0.37;
        let mut shifted = base.clone();
        shifted.lambda.mapv_inplace(|v| v + c);
        let s1 = discrete_action(&shifted, &grid).unwrap();
        // Independent tally of the continuity defect: periodic fluxes
        // telescope away, leaving the time differences of slice means.
        let vol = grid.cell_volume();
        let mut defect = 0.0;
        for n in 0..grid.n_time {
            for i in 0..grid.n_space[0] {
                let cv = CellValues::from_state(&base, &grid, NodeIndex { i, j: 0, n }).unwrap();
                let [a, bb, _, r00, r10, r01, r11] = cv.locals_1d();
                let cont = (0.5 * (r01 + r11) - 0.5 * (r00 + r10)) / grid.dt
                    + (0.5 * (r10 + r11) * bb - 0.5 * (r00 + r01) * a) / grid.dx[0];
                defect += cont * vol;
            }
        }
        assert!(
            ((s1 - s0) - c * defect).abs() < 1e-12 * (1.0 + s0.abs()),
            "multiplier shift changed more than the mass defect"
        );
    }

    #[test]
    fn planar_two_d_action_reduces_to_one_d() {
        let nt = 4;
        let g1 = grid1(8, nt);
        let g2 = GridSpec::new_2d(
            [[0.0, 1.0], [0.0, 1.0]],
            [8, 6],
            nt,
            g1.dt * nt as f64,
            g1.nu,
            Bc::Periodic,
        )
        .unwrap();
        let s1 = random_state(&g1, 7);
        let mut s2 = StateField::zeros(&g2);
        for i in 0..8 {
            for j in 0..6 {
                for n in 0..=nt {
                    s2.w1[[i, j, n]] = s1.w1[[i, 0, n]];
                    s2.lambda[[i, j, n]] = s1.lambda[[i, 0, n]];
                    s2.rho[[i, j, n]] = s1.rho[[i, 0, n]];
                }
            }
        }
        let a1 = discrete_action(&s1, &g1).unwrap();
        let a2 = discrete_action(&s2, &g2).unwrap();
        let extent2 = g2.domain[1][1] - g2.domain[1][0];
        assert!(
            (a2 - a1 * extent2).abs() < 1e-12 * (1.0 + a1.abs()),
            "{a2} vs {}",
            a1 * extent2
        );
    }

    #[test]
    fn action_converges_to_continuum_at_second_order() {
        let tau = std::f64::consts::TAU;
        let t_end = 0.5;
        let nu = 0.5;
        let rho = |x: f64, t: f64| 1.0 + 0.3 * (tau * (x - 0.3 * t)).sin();
        let rho_x = |x: f64, t: f64| 0.3 * tau * (tau * (x - 0.3 * t)).cos();
        let rho_t = |x: f64, t: f64| -0.09 * tau * (tau * (x - 0.3 * t)).cos();
        let w = |x: f64, t: f64| 0.2 + 0.1 * (tau * (x + 0.2 * t)).cos();
        let w_x = |x: f64, t: f64| -0.1 * tau * (tau * (x + 0.2 * t)).sin();
        let lam = |x: f64, t: f64| 0.4 * (tau * (x - 0.1 * t)).sin();
        // Continuum action by fine midpoint quadrature with analytic
        // derivatives in the integrand.
        let fine = 1024usize;
        let (hx, ht) = (1.0 / fine as f64, t_end / fine as f64);
        let mut exact = 0.0;
        for a in 0..fine {
            let x = (a as f64 + 0.5) * hx;
            for b in 0..fine {
                let t = (b as f64 + 0.5) * ht;
                let (r, rx, rt) = (rho(x, t), rho_x(x, t), rho_t(x, t));
                let (wv, wx) = (w(x, t), w_x(x, t));
                exact += (0.5 * r * wv * wv
                    + 0.5 * nu * nu * rx * wv
                    + nu.powi(4) / 8.0 * rx * rx / r
                    + lam(x, t) * (rt + rx * wv + r * wx))
                    * hx
                    * ht;
            }
        }
        let mut errs = Vec::new();
        for n in [8usize, 16, 32] {
            let grid = GridSpec::new_1d([0.0, 1.0], n, n, t_end, nu, Bc::Periodic).unwrap();
            let mut st = StateField::zeros(&grid);
            for i in 0..n {
                let x = grid.x(0, i);
                for m in 0..=n {
                    let t = grid.t(m);
                    st.w1[[i, 0, m]] = w(x, t);
                    st.lambda[[i, 0, m]] = lam(x, t);
                    st.rho[[i, 0, m]] = rho(x, t);
                }
            }
            errs.push((discrete_action(&st, &grid).unwrap() - exact).abs());
        }
        for k in 0..errs.len() - 1 {
            let slope = (errs[k] / errs[k + 1]).log2();
            assert!(
                (slope - 2.0).abs() < 0.3,
                "refinement {k}: slope {slope}, errors {errs:?}"
            );
        }
    }
}
