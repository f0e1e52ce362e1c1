//! Outgoing fundamental solution of `Δ + k²` in the plane and its derivatives.
//!
//! `Γ^0(x) = ln|x| / 2π` and `Γ^k(x) = -(i/4) H_0^{(1)}(k|x|)` for `k ≠ 0`. All functions
//! take the difference vector `x - y`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::bessel::hankel1_01;
use crate::error::{Error, Result};
use crate::{CVec2, Point};

/// Wavenumber in 1/m. Complex values must have a nonnegative real part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wavenumber(pub Complex64);

/// Which branch of the kernel a wavenumber selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavenumberClass {
    Zero,
    RealPositive,
    Complex,
}

impl Wavenumber {
    pub const ZERO: Wavenumber = Wavenumber(Complex64 { re: 0.0, im: 0.0 });

    pub fn new(k: Complex64) -> Result<Self> {
        if k.re < 0.0 || !k.re.is_finite() || !k.im.is_finite() {
            return Err(Error::InvalidInput(format!(
                "wavenumber must have Re k >= 0, got {k}"
            )));
        }
        Ok(Wavenumber(k))
    }

    pub fn real(k: f64) -> Result<Self> {
        Self::new(Complex64::new(k, 0.0))
    }

    pub fn value(self) -> Complex64 {
        self.0
    }

    pub fn class(self) -> WavenumberClass {
        if self.0 == Complex64::new(0.0, 0.0) {
            WavenumberClass::Zero
        } else if self.0.im == 0.0 {
            WavenumberClass::RealPositive
        } else {
            WavenumberClass::Complex
        }
    }

    pub fn is_zero(self) -> bool {
        self.class() == WavenumberClass::Zero
    }
}

fn radius(x: Point) -> Result<f64> {
    let r = x[0].hypot(x[1]);
    if r == 0.0 || !r.is_finite() {
        return Err(Error::Singular(x));
    }
    Ok(r)
}

/// Radial profile `g(r)` and its first two derivatives; `Γ(x) = g(|x|)`.
#[derive(Debug, Clone, Copy)]
pub struct RadialKernel {
    pub value: Complex64,
    pub d1: Complex64,
    pub d2: Complex64,
}

/// `g, g', g''` at distance `r > 0`.
pub fn radial(k: Wavenumber, r: f64) -> RadialKernel {
    if k.is_zero() {
        return RadialKernel {
            value: Complex64::new(r.ln() / (2.0 * PI), 0.0),
            d1: Complex64::new(1.0 / (2.0 * PI * r), 0.0),
            d2: Complex64::new(-1.0 / (2.0 * PI * r * r), 0.0),
        };
    }
    let kv = k.0;
    let z = kv * r;
    let (h0, h1) = hankel1_01(z);
    let i4 = Complex64::new(0.0, 0.25);
    RadialKernel {
        value: -i4 * h0,
        d1: i4 * kv * h1,
        d2: i4 * kv * kv * (h0 - h1 / z),
    }
}

/// `Γ^k(x)`.
pub fn gamma(k: Wavenumber, x: Point) -> Result<Complex64> {
    let r = radius(x)?;
    Ok(radial(k, r).value)
}

/// `∇Γ^k(x)`.
pub fn grad_gamma(k: Wavenumber, x: Point) -> Result<CVec2> {
    let r = radius(x)?;
    let g = radial(k, r);
    let s = g.d1 / r;
    Ok([s * x[0], s * x[1]])
}

/// Hessian `D²Γ^k(x)`, symmetric.
pub fn hess_gamma(k: Wavenumber, x: Point) -> Result<[[Complex64; 2]; 2]> {
    let r = radius(x)?;
    let g = radial(k, r);
    Ok(hessian_from_radial(&g, x, r))
}

pub(crate) fn hessian_from_radial(g: &RadialKernel, x: Point, r: f64) -> [[Complex64; 2]; 2] {
    let e = [x[0] / r, x[1] / r];
    let a = g.d2 - g.d1 / r;
    let b = g.d1 / r;
    let off = a * (e[0] * e[1]);
    [[a * (e[0] * e[0]) + b, off], [off, a * (e[1] * e[1]) + b]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(re: f64, im: f64) -> Wavenumber {
        Wavenumber::new(Complex64::new(re, im)).unwrap()
    }

    #[test]
    fn static_kernel_values() {
        assert!(gamma(Wavenumber::ZERO, [1.0, 0.0]).unwrap().norm() < 1e-16);
        let e = std::f64::consts::E;
        let v = gamma(Wavenumber::ZERO, [0.0, e]).unwrap();
        assert!((v.re - 1.0 / (2.0 * PI)).abs() < 1e-16);
    }

    #[test]
    fn helmholtz_kernel_at_unit_distance() {
        let v = gamma(k(1.0, 0.0), [1.0, 0.0]).unwrap();
        // -(i/4)(J0(1) + i Y0(1))
        assert!((v.re - 0.088_256_964_215_676_96 / 4.0).abs() < 1e-14);
        assert!((v.im + 0.765_197_686_557_966_6 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_values() {
        let g = grad_gamma(Wavenumber::ZERO, [2.0, 0.0]).unwrap();
        assert!((g[0].re - 1.0 / (4.0 * PI)).abs() < 1e-16);
        assert!(g[1].norm() == 0.0);
        let g = grad_gamma(k(1.0, 0.0), [1.0, 0.0]).unwrap();
        // (i/4) H1(1) = (i/4)(0.44005 - 0.78121 i)
        assert!((g[0].re - 0.781_212_821_300_288_7 / 4.0).abs() < 1e-14);
        assert!((g[0].im - 0.440_050_585_744_933_5 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn static_hessian() {
        let h = hess_gamma(Wavenumber::ZERO, [1.0, 0.0]).unwrap();
        assert!((h[0][0].re + 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((h[1][1].re - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(h[0][1].norm() < 1e-16);
    }

    #[test]
    fn rejects_origin() {
        assert!(gamma(Wavenumber::ZERO, [0.0, 0.0]).is_err());
        assert!(grad_gamma(k(1.0, 0.0), [0.0, 0.0]).is_err());
        assert!(hess_gamma(k(1.0, 0.0), [0.0, 0.0]).is_err());
        assert!(Wavenumber::new(Complex64::new(-1.0, 0.0)).is_err());
    }
}
