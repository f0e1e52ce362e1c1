use mirage_core::bessel::{bessel_j01, hankel1_01};
use mirage_core::kernels::{gamma, grad_gamma, hess_gamma, Wavenumber};
use num_complex::Complex64;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn shifted(x: [f64; 2], axis: usize, h: f64) -> [f64; 2] {
    let mut y = x;
    y[axis] += h;
    y
}

/// Max error of the central-difference gradient of `gamma` at step `h`.
fn grad_fd_error(k: Wavenumber, x: [f64; 2], h: f64) -> f64 {
    let g = grad_gamma(k, x).unwrap();
    (0..2)
        .map(|a| {
            let fd = (gamma(k, shifted(x, a, h)).unwrap() - gamma(k, shifted(x, a, -h)).unwrap())
                / (2.0 * h);
            (fd - g[a]).norm()
        })
        .fold(0.0, f64::max)
}

fn hess_fd_error(k: Wavenumber, x: [f64; 2], h: f64) -> f64 {
    let hm = hess_gamma(k, x).unwrap();
    let mut err: f64 = 0.0;
    for b in 0..2 {
        let gp = grad_gamma(k, shifted(x, b, h)).unwrap();
        let gm = grad_gamma(k, shifted(x, b, -h)).unwrap();
        for a in 0..2 {
            err = err.max(((gp[a] - gm[a]) / (2.0 * h) - hm[a][b]).norm());
        }
    }
    err
}

fn observed_order(e1: f64, e2: f64) -> f64 {
    (e1 / e2).log2()
}

fn wavenumber() -> impl Strategy<Value = Wavenumber> {
    prop_oneof![
        Just(Wavenumber::ZERO),
        (0.2f64..3.0).prop_map(|k| Wavenumber::real(k).unwrap()),
        (0.2f64..3.0, 0.01f64..1.0).prop_map(|(a, b)| Wavenumber::new(c(a, b)).unwrap()),
    ]
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    (0.5f64..4.0, 0.0f64..std::f64::consts::TAU).prop_map(|(r, t)| [r * t.cos(), r * t.sin()])
}

#[test]
fn gamma_values() {
    assert_eq!(gamma(Wavenumber::ZERO, [1.0, 0.0]).unwrap(), c(0.0, 0.0));
    let e = std::f64::consts::E;
    let v = gamma(Wavenumber::ZERO, [0.0, e]).unwrap();
    assert!((v.re - 1.0 / std::f64::consts::TAU).abs() < 1e-15);
    let k1 = Wavenumber::real(1.0).unwrap();
    let v = gamma(k1, [0.6, 0.8]).unwrap();
    // -(i/4)(J0(1) + i Y0(1)) with J0(1) = 0.7651976866, Y0(1) = 0.0882569642
    let want = c(0.0, -0.25) * c(0.765_197_686_557_966_6, 0.088_256_964_215_676_96);
    assert!((v - want).norm() < 1e-9, "{v}");
    assert!((v - c(0.0220642, -0.1912994)).norm() < 1e-6);
}

#[test]
fn gradient_values() {
    let g = grad_gamma(Wavenumber::ZERO, [2.5, 0.0]).unwrap();
    assert!((g[0].re - 1.0 / (std::f64::consts::TAU * 2.5)).abs() < 1e-15);
    assert_eq!(g[1], c(0.0, 0.0));
    let k1 = Wavenumber::real(1.0).unwrap();
    let g = grad_gamma(k1, [1.0, 0.0]).unwrap();
    let want = c(0.0, 0.25) * c(0.440_050_585_744_933_5, -0.781_212_821_300_288_7);
    assert!((g[0] - want).norm() < 1e-9);
    assert!(g[1].norm() < 1e-15);
}

#[test]
fn hessian_of_log_kernel_on_axis() {
    let h = hess_gamma(Wavenumber::ZERO, [1.0, 0.0]).unwrap();
    let s = 1.0 / std::f64::consts::TAU;
    assert!((h[0][0].re + s).abs() < 1e-14);
    assert!((h[1][1].re - s).abs() < 1e-14);
    assert!(h[0][1].norm() < 1e-15);
}

#[test]
fn origin_is_rejected() {
    let k = Wavenumber::real(1.0).unwrap();
    assert!(gamma(k, [0.0, 0.0]).is_err());
    assert!(grad_gamma(k, [0.0, 0.0]).is_err());
    assert!(hess_gamma(k, [0.0, 0.0]).is_err());
}

#[test]
fn hankel_real_part_is_bessel_j_on_real_axis() {
    for &z in &[c(1.0, 0.0), c(7.5, 0.0), c(0.01, 0.0), c(40.0, 0.0)] {
        let (j0, j1) = bessel_j01(z);
        let (h0, h1) = hankel1_01(z);
        assert!((h0.re - j0.re).abs() < 1e-10 * h0.norm().max(1.0));
        assert!((h1.re - j1.re).abs() < 1e-10 * h1.norm().max(1.0));
    }
}

#[test]
fn sommerfeld_radiation() {
    let k = Wavenumber::real(1.3).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..=20 {
        let r = 10f64.powf(2.0 + 2.0 * i as f64 / 20.0);
        let x = [r * 0.6, r * 0.8];
        let g = gamma(k, x).unwrap();
        let d = grad_gamma(k, x).unwrap();
        let dr = d[0] * 0.6 + d[1] * 0.8;
        worst = worst.max((dr - c(0.0, 1.3) * g).norm() * r.powf(1.5));
    }
    assert!(worst < 1.0, "{worst}");
}

#[test]
fn complex_wavenumber_decays_exponentially() {
    let k = Wavenumber::new(c(1.0, 0.5)).unwrap();
    let a = gamma(k, [10.0, 0.0]).unwrap().norm();
    let b = gamma(k, [20.0, 0.0]).unwrap().norm();
    // |H0(kr)| ~ e^{-Im k r} / sqrt(r)
    let ratio = b / a;
    let want = (-0.5f64 * 10.0).exp() / 2f64.sqrt();
    assert!((ratio / want - 1.0).abs() < 0.05, "{ratio} vs {want}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_second_order(k in wavenumber(), x in point()) {
        let e1 = grad_fd_error(k, x, 1e-2);
        let e2 = grad_fd_error(k, x, 5e-3);
        prop_assume!(e2 > 1e-12);
        prop_assert!(observed_order(e1, e2) >= 1.9, "order {}", observed_order(e1, e2));
    }

    #[test]
    fn hessian_is_second_order(k in wavenumber(), x in point()) {
        let e1 = hess_fd_error(k, x, 1e-2);
        let e2 = hess_fd_error(k, x, 5e-3);
        prop_assume!(e2 > 1e-12);
        prop_assert!(observed_order(e1, e2) >= 1.9, "order {}", observed_order(e1, e2));
    }

    #[test]
    fn hessian_trace_solves_helmholtz(k in wavenumber(), x in point()) {
        let h = hess_gamma(k, x).unwrap();
        let g = gamma(k, x).unwrap();
        let kk = k.value() * k.value();
        let lhs = h[0][0] + h[1][1] + kk * g;
        let scale = h[0][0].norm() + h[1][1].norm() + (kk * g).norm();
        prop_assert!(lhs.norm() <= 1e-10 * scale.max(1e-300));
    }

    #[test]
    fn hessian_is_symmetric(k in wavenumber(), x in point()) {
        let h = hess_gamma(k, x).unwrap();
        prop_assert_eq!(h[0][1], h[1][0]);
    }

    #[test]
    fn gradient_is_odd(k in wavenumber(), x in point()) {
        let a = grad_gamma(k, x).unwrap();
        let b = grad_gamma(k, [-x[0], -x[1]]).unwrap();
        prop_assert!((a[0] + b[0]).norm() <= 1e-14 * a[0].norm().max(1e-300) + 1e-300);
        prop_assert!((a[1] + b[1]).norm() <= 1e-14 * a[1].norm().max(1e-300) + 1e-300);
    }
}
