//! Bessel and Hankel functions of orders 0 and 1 for complex argument.
//!
//! Three evaluation routes are combined:
//!
//! * ascending power series for `|z| <= SERIES_RADIUS`,
//! * the Hankel asymptotic expansion (optimally truncated) beyond it,
//! * the Macdonald integral `K_n(w) = ∫_0^∞ exp(-w cosh t) cosh(nt) dt`, evaluated by
//!   the trapezoidal rule on the whole line, for `H^{(1)}` when `Im z` is large enough
//!   that `J + iY` would cancel catastrophically.
//!
//! The functions are accurate to about `1e-11` relative (to `max(|J|, |Y|, |H|)`) for
//! `Re z >= 0`, `z != 0`, `|z| <= 1e3`.

use num_complex::Complex64;
use std::f64::consts::{FRAC_2_PI, FRAC_PI_2, FRAC_PI_4, PI};

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const SERIES_RADIUS: f64 = 12.0;
/// Below `SERIES_RADIUS`, `H^{(1)}` is taken from the Macdonald integral when `Im z`
/// exceeds this value.
const INTEGRAL_IM_THRESHOLD: f64 = 2.0;

/// `J_0, J_1, Y_0, Y_1` at one argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BesselSet {
    pub j0: Complex64,
    pub j1: Complex64,
    pub y0: Complex64,
    pub y1: Complex64,
}

impl BesselSet {
    /// `H_0^{(1)} = J_0 + i Y_0`.
    pub fn h0(&self) -> Complex64 {
        self.j0 + Complex64::i() * self.y0
    }

    /// `H_1^{(1)} = J_1 + i Y_1`.
    pub fn h1(&self) -> Complex64 {
        self.j1 + Complex64::i() * self.y1
    }
}

/// Bessel functions of the first kind, orders 0 and 1. Valid on the whole plane.
pub fn bessel_j01(z: Complex64) -> (Complex64, Complex64) {
    if z.re < 0.0 {
        let (j0, j1) = bessel_j01(-z);
        return (j0, -j1);
    }
    if z.norm() <= SERIES_RADIUS {
        j01_series(z)
    } else {
        let a = asymptotic(z);
        (a.j0, a.j1)
    }
}

/// `J_0(z)`.
pub fn bessel_j0(z: Complex64) -> Complex64 {
    bessel_j01(z).0
}

/// `J_1(z)`.
pub fn bessel_j1(z: Complex64) -> Complex64 {
    bessel_j01(z).1
}

/// All four functions `J_0, J_1, Y_0, Y_1` for `Re z >= 0`, `z != 0`.
pub fn bessel_set(z: Complex64) -> BesselSet {
    let r = z.norm();
    if r > SERIES_RADIUS {
        return asymptotic(z);
    }
    let (j0, j1) = j01_series(z);
    if z.im >= INTEGRAL_IM_THRESHOLD {
        // J and Y both grow like exp(Im z) here while H^{(1)} decays, so H comes
        // from the integral and Y is recovered from it.
        let (h0, h1) = hankel_from_macdonald(z);
        let mi = -Complex64::i();
        return BesselSet {
            j0,
            j1,
            y0: mi * (h0 - j0),
            y1: mi * (h1 - j1),
        };
    }
    let (y0, y1) = y01_series(z, j0, j1);
    BesselSet { j0, j1, y0, y1 }
}

/// Hankel functions of the first kind `(H_0^{(1)}(z), H_1^{(1)}(z))`.
pub fn hankel1_01(z: Complex64) -> (Complex64, Complex64) {
    let r = z.norm();
    if r > SERIES_RADIUS {
        return asymptotic_hankel(z);
    }
    if z.im >= INTEGRAL_IM_THRESHOLD {
        return hankel_from_macdonald(z);
    }
    let s = bessel_set(z);
    (s.h0(), s.h1())
}

/// `H_0^{(1)}(z)`.
pub fn hankel1_0(z: Complex64) -> Complex64 {
    hankel1_01(z).0
}

/// `H_1^{(1)}(z)`.
pub fn hankel1_1(z: Complex64) -> Complex64 {
    hankel1_01(z).1
}

fn j01_series(z: Complex64) -> (Complex64, Complex64) {
    let q = -z * z * 0.25;
    let mut t0 = Complex64::new(1.0, 0.0);
    let mut t1 = Complex64::new(1.0, 0.0);
    let mut s0 = t0;
    let mut s1 = t1;
    for k in 1..200 {
        let kf = k as f64;
        t0 *= q / (kf * kf);
        t1 *= q / (kf * (kf + 1.0));
        s0 += t0;
        s1 += t1;
        if t0.norm() <= 1e-18 * s0.norm().max(1e-300) && t1.norm() <= 1e-18 * s1.norm().max(1e-300)
        {
            break;
        }
    }
    (s0, s1 * z * 0.5)
}

fn y01_series(z: Complex64, j0: Complex64, j1: Complex64) -> (Complex64, Complex64) {
    let q = -z * z * 0.25;
    let log_term = (z * 0.5).ln() + EULER_GAMMA;

    // Y0 tail: -sum_{k>=1} H_k q^k / (k!)^2
    let mut t0 = Complex64::new(1.0, 0.0);
    let mut tail0 = Complex64::new(0.0, 0.0);
    // Y1 tail: sum_{k>=0} (H_k + H_{k+1}) q^k / (k!(k+1)!)
    let mut t1 = Complex64::new(1.0, 0.0);
    let mut tail1 = Complex64::new(1.0, 0.0); // k = 0: H_0 + H_1 = 1
    let mut harmonic = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        harmonic += 1.0 / kf;
        t0 *= q / (kf * kf);
        t1 *= q / (kf * (kf + 1.0));
        let d0 = t0 * harmonic;
        let d1 = t1 * (2.0 * harmonic + 1.0 / (kf + 1.0));
        tail0 -= d0;
        tail1 += d1;
        if d0.norm() <= 1e-18 * tail0.norm().max(1e-300)
            && d1.norm() <= 1e-18 * tail1.norm().max(1e-300)
        {
            break;
        }
    }
    let y0 = FRAC_2_PI * (log_term * j0 + tail0);
    let y1 = -FRAC_2_PI / z + FRAC_2_PI * log_term * j1 - (z * 0.5) * tail1 / PI;
    (y0, y1)
}

/// Optimally truncated sums `P_n, Q_n` of the Hankel asymptotic expansion, n = 0, 1.
fn asymptotic_pq(z: Complex64) -> [(Complex64, Complex64); 2] {
    let mut out = [(Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)); 2];
    let inv = z.inv();
    for (order, slot) in out.iter_mut().enumerate() {
        let mu = 4.0 * (order * order) as f64;
        let mut p = Complex64::new(1.0, 0.0);
        let mut q = Complex64::new(0.0, 0.0);
        let mut term = Complex64::new(1.0, 0.0);
        let mut last = f64::INFINITY;
        for k in 1..60 {
            let odd = (2 * k - 1) as f64;
            let next = term * inv * ((mu - odd * odd) / (8.0 * k as f64));
            let size = next.norm();
            if size >= last {
                break;
            }
            last = size;
            term = next;
            // sign pattern (-1)^{floor(k/2)} split between Q (odd k) and P (even k)
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            if k % 2 == 1 {
                q += term * sign;
            } else {
                p += term * sign;
            }
            if size < 1e-17 {
                break;
            }
        }
        *slot = (p, q);
    }
    out
}

fn asymptotic(z: Complex64) -> BesselSet {
    let pq = asymptotic_pq(z);
    let amp = (Complex64::new(FRAC_2_PI, 0.0) / z).sqrt();
    let chi0 = z - FRAC_PI_4;
    let chi1 = z - 3.0 * FRAC_PI_4;
    let (c0, s0) = (chi0.cos(), chi0.sin());
    let (c1, s1) = (chi1.cos(), chi1.sin());
    let (p0, q0) = pq[0];
    let (p1, q1) = pq[1];
    BesselSet {
        j0: amp * (p0 * c0 - q0 * s0),
        y0: amp * (p0 * s0 + q0 * c0),
        j1: amp * (p1 * c1 - q1 * s1),
        y1: amp * (p1 * s1 + q1 * c1),
    }
}

fn asymptotic_hankel(z: Complex64) -> (Complex64, Complex64) {
    let pq = asymptotic_pq(z);
    let amp = (Complex64::new(FRAC_2_PI, 0.0) / z).sqrt();
    let i = Complex64::i();
    let e0 = (i * (z - FRAC_PI_4)).exp();
    let e1 = (i * (z - 3.0 * FRAC_PI_4)).exp();
    (
        amp * (pq[0].0 + i * pq[0].1) * e0,
        amp * (pq[1].0 + i * pq[1].1) * e1,
    )
}

/// `H_0^{(1)}(z) = -(2i/π) K_0(-iz)` and `H_1^{(1)}(z) = -(2/π) K_1(-iz)`, valid for `Im z > 0`.
fn hankel_from_macdonald(z: Complex64) -> (Complex64, Complex64) {
    let w = -Complex64::i() * z;
    let (k0, k1) = macdonald_k01(w);
    (-Complex64::i() * FRAC_2_PI * k0, -FRAC_2_PI * k1)
}

/// `K_0(w), K_1(w)` for `Re w > 0` by the trapezoidal rule applied to the even, entire
/// integrand `exp(-w cosh t) cosh(nt)`; the step is set from the width of the strip
/// in which the integrand stays bounded.
fn macdonald_k01(w: Complex64) -> (Complex64, Complex64) {
    let strip = FRAC_PI_2 - w.arg().abs();
    let h = (2.0 * PI * 0.8 * strip / 38.0).min(0.25);
    let mut k0 = (-w).exp() * 0.5;
    let mut k1 = k0;
    let mut j = 1usize;
    loop {
        let t = j as f64 * h;
        let ch = t.cosh();
        let f = (-w * ch).exp();
        let d0 = f;
        let d1 = f * t.cosh();
        k0 += d0;
        k1 += d1;
        if w.re * ch > 45.0 || j > 100_000 {
            break;
        }
        j += 1;
    }
    (k0 * h, k1 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn values_at_one() {
        let s = bessel_set(c(1.0, 0.0));
        assert!((s.j0.re - 0.765_197_686_557_966_6).abs() < 1e-14);
        assert!((s.y0.re - 0.088_256_964_215_676_96).abs() < 1e-14);
        assert!((s.j1.re - 0.440_050_585_744_933_5).abs() < 1e-14);
        assert!((s.y1.re + 0.781_212_821_300_288_7).abs() < 1e-14);
    }

    #[test]
    fn routes_agree_at_crossover() {
        // series vs asymptotic on both sides of the switch radius
        for &arg in &[0.0, 0.3, 0.9, 1.3] {
            let z = Complex64::from_polar(SERIES_RADIUS, arg);
            let s = {
                let (j0, j1) = j01_series(z);
                let (y0, y1) = y01_series(z, j0, j1);
                BesselSet { j0, j1, y0, y1 }
            };
            let a = asymptotic(z);
            let scale = a.h0().norm().max(a.j0.norm());
            assert!((s.j0 - a.j0).norm() < 1e-9 * scale, "arg {arg}");
            assert!((s.j1 - a.j1).norm() < 1e-9 * scale, "arg {arg}");
        }
    }

    #[test]
    fn macdonald_matches_series_in_overlap() {
        let z = c(1.5, 2.5);
        let (h0, h1) = hankel_from_macdonald(z);
        let (j0, j1) = j01_series(z);
        let (y0, y1) = y01_series(z, j0, j1);
        let i = Complex64::i();
        assert!((h0 - (j0 + i * y0)).norm() < 1e-12 * h0.norm().max(1.0));
        assert!((h1 - (j1 + i * y1)).norm() < 1e-12 * h1.norm().max(1.0));
    }

    #[test]
    fn odd_and_even_reflection_of_j() {
        let z = c(-3.2, 0.7);
        let (j0, j1) = bessel_j01(z);
        let (j0m, j1m) = bessel_j01(-z);
        assert!((j0 - j0m).norm() < 1e-15);
        assert!((j1 + j1m).norm() < 1e-15);
    }
}
