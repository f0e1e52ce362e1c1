//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::time::{Duration, Instant};

use mirage_core::forward::{
    free_dipole_data, measure, modal_field, relative_l2, sensor_ring, TransmissionSolver,
};
use mirage_core::geometry::{discretize, BoundaryMesh, CurveKind, ParametricCurve};
use mirage_core::harness::{
    run_distance_sweep, run_mirage, run_mode_table, run_noise_sweep, spearman, ExperimentConfig,
    Setup,
};
use mirage_core::imaging::{psf_kernel, PsfMode};
use mirage_core::kernels::{gamma, grad_gamma, Wavenumber};
use mirage_core::localize::{add_noise, LocalizationProblem};
use mirage_core::potentials::{calderon_residual, HStarMetric};
use mirage_core::spectrum::compute_spectrum;
use num_complex::Complex64;

const DELTA: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mesh(kind: CurveKind, m: usize) -> BoundaryMesh {
    discretize(&ParametricCurve::new(kind, DELTA).build().unwrap(), m).unwrap()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn disk_spectrum() -> Outcome {
    let t = Instant::now();
    let (s, _) = compute_spectrum(&mesh(CurveKind::Disk, 256), 10).unwrap();
    let el = t.elapsed();
    let l0 = (s.eigenvalues[0] - 0.5).abs();
    let rest = s.eigenvalues[1..=10]
        .iter()
        .fold(0.0f64, |m, l| m.max(l.abs()));
    outcome(
        l0 < 1e-6 && rest < 1e-6 && el < Duration::from_secs(5),
        format!(
            "|λ0-1/2| = {l0:.1e}, max|λn| = {rest:.1e}, {:.2} s",
            secs(el)
        ),
    )
}

fn ellipse_spectrum() -> Outcome {
    let t = Instant::now();
    let (a, _) = compute_spectrum(&mesh(CurveKind::ellipse(), 256), 16).unwrap();
    let (b, _) = compute_spectrum(&mesh(CurveKind::ellipse(), 512), 16).unwrap();
    let el = t.elapsed();
    let (mut closed, mut doubling) = (0.0f64, 0.0f64);
    for n in 1..=6 {
        let mag = 0.5 * (2.0f64 / 3.0).powi(n);
        for (i, want) in [(2 * n as usize - 1, -mag), (2 * n as usize, mag)] {
            closed = closed.max((a.eigenvalues[i] - want).abs());
            doubling = doubling.max((a.eigenvalues[i] - b.eigenvalues[i]).abs());
        }
    }
    outcome(
        closed < 1e-4 && doubling < 1e-4 && el < Duration::from_secs(10),
        format!(
            "closed-form {closed:.1e}, M=256 vs 512 {doubling:.1e}, {:.2} s",
            secs(el)
        ),
    )
}

fn calderon() -> Outcome {
    let mut worst = 0.0f64;
    for kind in [
        CurveKind::flower(),
        CurveKind::diamond(),
        CurveKind::ellipse(),
    ] {
        let m = mesh(kind, 256);
        let (_, ops) = HStarMetric::build(&m).unwrap();
        worst = worst.max(calderon_residual(&m, &ops));
    }
    outcome(worst < 1e-8, format!("max relative residual {worst:.1e}"))
}

fn helmholtz_kirchhoff(setup: &Setup) -> Outcome {
    let k = setup.medium.k_m(setup.omega).unwrap();
    let z = [18.65e-9, 16.65e-9];
    let q = psf_kernel(
        z,
        z,
        k,
        setup.radius,
        setup.config.discretization.sensors,
        PsfMode::Quadrature,
    )
    .unwrap();
    let want = k.value() / 8.0;
    let mut err = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            let w = if i == j {
                want
            } else {
                Complex64::new(0.0, 0.0)
            };
            err = err.max((q[i][j] - w).norm() / want.norm());
        }
    }
    outcome(
        err < 0.01,
        format!("max |R(z,z) - k/8 I| / |k/8| = {:.3}%", err * 100.0),
    )
}

fn forward_convergence(setup: &Setup) -> Outcome {
    let src = setup.source().unwrap();
    let run = |m: usize| {
        let mesh = mesh(CurveKind::diamond(), m);
        let solver = TransmissionSolver::new(&mesh, &setup.medium, setup.omega).unwrap();
        let pair = solver.solve(&src).unwrap();
        measure(
            &solver,
            &src,
            &pair,
            setup.radius,
            setup.config.discretization.sensors,
        )
        .unwrap()
        .samples
    };
    let rel = relative_l2(&run(256), &run(512));
    outcome(rel < 1e-4, format!("far field M=256 vs 512: {rel:.1e}"))
}

fn modal_vs_bie(setup: &Setup) -> Outcome {
    let src = setup.source().unwrap();
    let n = setup.config.discretization.sensors;
    let xs = sensor_ring(setup.radius, n);
    let total = setup.far_field(&src).unwrap();
    let free = free_dipole_data(&src, &setup.medium, setup.radius, n).unwrap();
    let bie: Vec<Complex64> = total
        .samples
        .iter()
        .zip(&free.samples)
        .map(|(a, b)| a - b)
        .collect();
    let mismatch: Vec<f64> = [0usize, 2, 4, 6]
        .iter()
        .map(|&m| {
            let f = modal_field(&setup.spectrum, &setup.solver, &src, m, &xs).unwrap();
            let scat: Vec<Complex64> = f.iter().zip(&free.samples).map(|(a, b)| a - b).collect();
            relative_l2(&scat, &bie)
        })
        .collect();
    let monotone = mismatch.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        mismatch[3] < 0.2 && monotone,
        format!(
            "mismatch N=0,2,4,6: {:?}",
            mismatch
                .iter()
                .map(|m| format!("{m:.3}"))
                .collect::<Vec<_>>()
        ),
    )
}

fn mirage_bands() -> Outcome {
    let t = Instant::now();
    let d = run_mirage(&ExperimentConfig::preset("diamond").unwrap()).unwrap();
    let e = run_mirage(&ExperimentConfig::preset("ellipse").unwrap()).unwrap();
    let f = run_mirage(&ExperimentConfig::preset("flower").unwrap()).unwrap();
    let el = t.elapsed();
    let (du, dc) = (
        d.error_uncorrected.position_nm,
        d.error_corrected.position_nm,
    );
    let (eu, ec) = (
        e.error_uncorrected.position_nm,
        e.error_corrected.position_nm,
    );
    let fc = f.error_corrected.position_nm;
    let pass = (25.0..=55.0).contains(&du)
        && dc < 10.0
        && (50.0..=95.0).contains(&eu)
        && ec < 12.0
        && fc < 12.0
        && el < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "diamond {du:.1}/{dc:.1} nm, ellipse {eu:.1}/{ec:.1} nm, flower {:.1}/{fc:.1} nm, {:.0} s",
            f.error_uncorrected.position_nm,
            secs(el)
        ),
    )
}

fn mode_table() -> Outcome {
    let r = run_mode_table(&ExperimentConfig::preset("diamond").unwrap()).unwrap();
    let mut pass = true;
    for row in &r.rows {
        match row.n_modes {
            2..=5 => pass &= row.position_error_nm > 50.0,
            6 | 7 => pass &= row.position_error_nm < 10.0,
            _ => {}
        }
    }
    let shown: Vec<String> = r
        .rows
        .iter()
        .map(|x| format!("N={}: {:.1}", x.n_modes, x.position_error_nm))
        .collect();
    outcome(pass, format!("position error nm {}", shown.join(", ")))
}

fn distance_sweep() -> Outcome {
    let r = run_distance_sweep(&ExperimentConfig::preset("diamond").unwrap()).unwrap();
    let near = r
        .rows
        .iter()
        .min_by(|a, b| a.distance_nm.total_cmp(&b.distance_nm))
        .unwrap();
    let far = r
        .rows
        .iter()
        .max_by(|a, b| a.distance_nm.total_cmp(&b.distance_nm))
        .unwrap();
    let pass = near.err_corr_nm <= 0.5 * near.err_uncorr_nm
        && (far.err_corr_nm - far.err_uncorr_nm).abs() <= 5.0;
    outcome(
        pass,
        format!(
            "closest {:.1} nm: {:.1}/{:.1}, farthest {:.1} nm: {:.1}/{:.1} (uncorrected/corrected)",
            near.distance_nm,
            near.err_uncorr_nm,
            near.err_corr_nm,
            far.distance_nm,
            far.err_uncorr_nm,
            far.err_corr_nm
        ),
    )
}

fn noise_robustness() -> Outcome {
    let t = Instant::now();
    let r = run_noise_sweep(&ExperimentConfig::preset("diamond").unwrap()).unwrap();
    let el = t.elapsed();
    let sig: Vec<f64> = r.levels.iter().map(|l| l.sigma0).collect();
    let med: Vec<f64> = r.levels.iter().map(|l| l.err_corr_nm.median).collect();
    let rho = spearman(&sig, &med).unwrap();
    let at40 = r
        .levels
        .iter()
        .find(|l| (l.sigma0 - 0.4).abs() < 1e-12)
        .unwrap();
    let pass = at40.err_corr_nm.n == 100
        && at40.err_corr_nm.median < 15.0
        && rho >= 0.0
        && el < Duration::from_secs(1800);
    outcome(
        pass,
        format!(
            "median at 40%: {:.1} nm, medians {:?}, Spearman {rho:.2}, {:.0} s",
            at40.err_corr_nm.median,
            med.iter().map(|m| format!("{m:.1}")).collect::<Vec<_>>(),
            secs(el)
        ),
    )
}

fn fd_order(k: Wavenumber, x: [f64; 2]) -> f64 {
    let err = |h: f64| {
        let g = grad_gamma(k, x).unwrap();
        (0..2)
            .map(|a| {
                let mut p = x;
                let mut m = x;
                p[a] += h;
                m[a] -= h;
                ((gamma(k, p).unwrap() - gamma(k, m).unwrap()) / (2.0 * h) - g[a]).norm()
            })
            .fold(0.0, f64::max)
    };
    (err(1e-2) / err(5e-3)).log2()
}

fn property_suites(setup: &Setup) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    // finite-difference order of the kernel gradient
    let ks = [
        (Wavenumber::ZERO, [0.7, -0.4]),
        (Wavenumber::real(2.0).unwrap(), [1.1, 0.3]),
        (
            Wavenumber::new(Complex64::new(1.0, 0.4)).unwrap(),
            [-0.5, 0.9],
        ),
    ];
    let order = ks
        .iter()
        .map(|&(k, x)| fd_order(k, x))
        .fold(f64::INFINITY, f64::min);
    pass &= order >= 1.9;
    notes.push(format!("FD order {order:.2}"));
    // Hermitian diagonal and conjugate-transpose symmetry of the PSF
    let k = setup.medium.k_m(setup.omega).unwrap();
    let (y, z) = ([30e-9, -10e-9], [-20e-9, 45e-9]);
    let n = setup.config.discretization.sensors;
    let a = psf_kernel(y, z, k, setup.radius, n, PsfMode::Quadrature).unwrap();
    let b = psf_kernel(z, y, k, setup.radius, n, PsfMode::Quadrature).unwrap();
    let d = psf_kernel(y, y, k, setup.radius, n, PsfMode::Quadrature).unwrap();
    let scale = d[0][0].norm();
    let mut sym = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            sym = sym.max((a[i][j] - b[j][i].conj()).norm() / scale);
            sym = sym.max((d[i][j] - d[j][i].conj()).norm() / scale);
        }
    }
    pass &= sym < 1e-10;
    notes.push(format!("symmetry {sym:.1e}"));
    // noise variance
    let src = setup.source().unwrap();
    let data = setup.far_field(&src).unwrap();
    let norm2: f64 = data.samples.iter().map(|u| u.norm_sqr()).sum();
    let sigma = 0.3 * (norm2 / n as f64).sqrt();
    let (mut acc, mut count) = (0.0, 0.0);
    for seed in 0..40 {
        let noisy = add_noise(&data, 0.3, seed).unwrap();
        for (u, v) in noisy.samples.iter().zip(&data.samples) {
            acc += (u - v).norm_sqr();
            count += 1.0;
        }
    }
    let ratio = (acc / count).sqrt() / sigma;
    pass &= (ratio - 1.0).abs() < 0.03;
    notes.push(format!("noise std ratio {ratio:.3}"));
    // determinism
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let mut cfg = setup.config.clone();
        cfg.out = Some(dir.path().to_path_buf());
        run_mirage(&cfg).unwrap();
    }
    let same = ["mirage.json", "data.csv", "image.csv"].iter().all(|f| {
        std::fs::read(dir_a.path().join(f)).unwrap() == std::fs::read(dir_b.path().join(f)).unwrap()
    });
    pass &= same;
    notes.push(format!("byte-identical reruns {same}"));
    // variable projection optimality
    let basis = setup.mode_basis(6).unwrap();
    let prob = LocalizationProblem::new(
        &setup.projector,
        &setup.reduced,
        &data,
        Some(&basis),
        setup.config.fit,
    )
    .unwrap();
    let zt = [src.position[0] + 3e-9, src.position[1] + 2e-9];
    let fit = prob.solve_linear(zt).unwrap();
    let mut worse = true;
    for i in 0..fit.coefficients.len() {
        for step in [1e-3, -1e-3] {
            let mut c = fit.coefficients.clone();
            let d = c[i].norm().max(1e-30) * step;
            c[i] += d;
            worse &= prob.residual2_at(zt, &c).unwrap() >= fit.residual2 * (1.0 - 1e-10);
        }
    }
    pass &= worse;
    notes.push(format!("varpro optimal {worse}"));
    outcome(pass, notes.join(", "))
}

fn main() {
    let setup = Setup::new(&ExperimentConfig::preset("diamond").unwrap()).unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("disk NP spectrum", Box::new(disk_spectrum)),
        ("ellipse NP spectrum", Box::new(ellipse_spectrum)),
        ("Calderon identity", Box::new(calderon)),
        (
            "Helmholtz-Kirchhoff",
            Box::new(|| helmholtz_kirchhoff(&setup)),
        ),
        (
            "forward self-convergence",
            Box::new(|| forward_convergence(&setup)),
        ),
        ("modal vs BIE", Box::new(|| modal_vs_bie(&setup))),
        ("mirage reproduction", Box::new(mirage_bands)),
        ("mode-count trend", Box::new(mode_table)),
        ("distance sweep", Box::new(distance_sweep)),
        ("noise robustness", Box::new(noise_robustness)),
        ("property suites", Box::new(|| property_suites(&setup))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
