//! Stack-allocated forward-mode scalars carrying first (and optionally
//! second) derivatives with respect to the locals of one space-time cell.
//! The cell Lagrangian is written once, generically; residual assembly
//! instantiates `D1`, Jacobian assembly `D2`, plain evaluation `f64`.
//! Everything is exact to round-off, so the discrete gradient is the
//! analytic gradient of the discrete action by construction.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scal:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn c(x: f64) -> Self;
    fn scale(self, s: f64) -> Self;
}

impl Scal for f64 {
    fn c(x: f64) -> Self {
        x
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

/// Value plus gradient.
#[derive(Clone, Copy, Debug)]
pub struct D1<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
}

impl<const N: usize> D1<N> {
    pub fn var(i: usize, x: f64) -> Self {
        let mut g = [0.0; N];
        g[i] = 1.0;
        D1 { v: x, g }
    }
}

impl<const N: usize> Add for D1<N> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for k in 0..N {
            self.g[k] += o.g[k];
        }
        self
    }
}

impl<const N: usize> Sub for D1<N> {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for k in 0..N {
            self.g[k] -= o.g[k];
        }
        self
    }
}

impl<const N: usize> Neg for D1<N> {
    type Output = Self;
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for k in 0..N {
            self.g[k] = -self.g[k];
        }
        self
    }
}

impl<const N: usize> Mul for D1<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut g = [0.0; N];
        for k in 0..N {
            g[k] = self.g[k] * o.v + self.v * o.g[k];
        }
        D1 { v: self.v * o.v, g }
    }
}

impl<const N: usize> Div for D1<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let mut g = [0.0; N];
        for k in 0..N {
            g[k] = (self.g[k] - self.v * inv * o.g[k]) * inv;
        }
        D1 { v: self.v * inv, g }
    }
}

impl<const N: usize> Scal for D1<N> {
    fn c(x: f64) -> Self {
        D1 { v: x, g: [0.0; N] }
    }
    fn scale(mut self, s: f64) -> Self {
        self.v *= s;
        for k in 0..N {
            self.g[k] *= s;
        }
        self
    }
}

/// Value, gradient, and dense symmetric Hessian.
#[derive(Clone, Copy, Debug)]
pub struct D2<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> D2<N> {
    pub fn var(i: usize, x: f64) -> Self {
        let mut g = [0.0; N];
        g[i] = 1.0;
        D2 { v: x, g, h: [[0.0; N]; N] }
    }
}

impl<const N: usize> Add for D2<N> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for k in 0..N {
            self.g[k] += o.g[k];
            for l in 0..N {
                self.h[k][l] += o.h[k][l];
            }
        }
        self
    }
}

impl<const N: usize> Sub for D2<N> {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for k in 0..N {
            self.g[k] -= o.g[k];
            for l in 0..N {
                self.h[k][l] -= o.h[k][l];
            }
        }
        self
    }
}

impl<const N: usize> Neg for D2<N> {
    type Output = Self;
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for k in 0..N {
            self.g[k] = -self.g[k];
            for l in 0..N {
                self.h[k][l] = -self.h[k][l];
            }
        }
        self
    }
}

impl<const N: usize> Mul for D2<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut out = D2 { v: self.v * o.v, g: [0.0; N], h: [[0.0; N]; N] };
        for k in 0..N {
            out.g[k] = self.g[k] * o.v + self.v * o.g[k];
            for l in 0..N {
                out.h[k][l] = self.h[k][l] * o.v
                    + self.g[k] * o.g[l]
                    + self.g[l] * o.g[k]
                    + self.v * o.h[k][l];
            }
        }
        out
    }
}

impl<const N: usize> D2<N> {
    fn recip(self) -> Self {
        let inv = 1.0 / self.v;
        let inv2 = inv * inv;
        let mut out = D2 { v: inv, g: [0.0; N], h: [[0.0; N]; N] };
        for k in 0..N {
            out.g[k] = -self.g[k] * inv2;
            for l in 0..N {
                out.h[k][l] =
                    (2.0 * self.g[k] * self.g[l] * inv - self.h[k][l]) * inv2;
            }
        }
        out
    }
}

impl<const N: usize> Div for D2<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<const N: usize> Scal for D2<N> {
    fn c(x: f64) -> Self {
        D2 { v: x, g: [0.0; N], h: [[0.0; N]; N] }
    }
    fn scale(mut self, s: f64) -> Self {
        self.v *= s;
        for k in 0..N {
            self.g[k] *= s;
            for l in 0..N {
                self.h[k][l] *= s;
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<T: Scal>(z: &[T; 3]) -> T {
        // z0^2 * z1 + z0 / z2 - 3 z1
        z[0] * z[0] * z[1] + z[0] / z[2] - z[1].scale(3.0)
    }

    #[test]
    fn matches_finite_differences() {
        let x = [1.3, -0.7, 2.1];
        let z2: [D2<3>; 3] = [D2::var(0, x[0]), D2::var(1, x[1]), D2::var(2, x[2])];
        let d = f(&z2);
        let h = 1e-4;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((d.g[k] - fd).abs() < 1e-8, "grad[{k}]: {} vs {}", d.g[k], fd);
            for l in 0..3 {
                let mut pp = x;
                let mut pm = x;
                let mut mp = x;
                let mut mm = x;
                pp[k] += h;
                pp[l] += h;
                pm[k] += h;
                pm[l] -= h;
                mp[k] -= h;
                mp[l] += h;
                mm[k] -= h;
                mm[l] -= h;
                let fd2 = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
                assert!(
                    (d.h[k][l] - fd2).abs() < 1e-6,
                    "hess[{k}][{l}]: {} vs {}",
                    d.h[k][l],
                    fd2
                );
            }
        }
        let z1: [D1<3>; 3] = [D1::var(0, x[0]), D1::var(1, x[1]), D1::var(2, x[2])];
        let d1 = f(&z1);
        assert_eq!(d1.v, d.v);
        assert_eq!(d1.g, d.g);
    }
}
