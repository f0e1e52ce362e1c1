//! Dipole localization by fitting the point-spread kernel, optionally together with
//! mode images, to the back-propagated image in `L²(Ω̃)`.
//!
//! The residual is linear in the dipole moment and the mode coefficients, so they are
//! eliminated by linear least squares for every candidate position and only `z` is
//! searched (Nelder–Mead with multistart).
//!
//! Every image is `B v` for a sensor vector `v`, hence the grid residual equals the
//! Hermitian form `vᴴ Q v` with `Q = Bᴴ W B`. [`ReducedForm`] factors `Q = Cᴴ C` once,
//! after which each objective evaluation works in the small space `C v`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{sensor_ring, DipoleSource, FarFieldData};
use crate::imaging::{Backprojector, GridSpec, ModeBasis};
use crate::kernels::{grad_gamma, Wavenumber};
use crate::Point;

/// Whether a block of linear coefficients is fitted as complex or real numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientField {
    #[default]
    Complex,
    /// Real coefficient: the source phase is taken as known.
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Simplex size at which the search stops, in nm.
    pub xtol_nm: f64,
    /// Objective evaluations per start.
    pub max_evals: usize,
    pub starts: usize,
    /// Initial simplex edge, in nm.
    pub initial_step_nm: f64,
    pub moment_field: CoefficientField,
    pub mode_field: CoefficientField,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            xtol_nm: 1e-3,
            max_evals: 500,
            starts: 5,
            initial_step_nm: 20.0,
            moment_field: CoefficientField::Real,
            mode_field: CoefficientField::Complex,
        }
    }
}

/// `C` with `Cᴴ C = Q`, eigen-directions below `1e-14 λ_max` dropped.
#[derive(Debug, Clone)]
pub struct ReducedForm {
    pub factor: DMatrix<Complex64>,
    pub spec: GridSpec,
    pub radius: f64,
    pub n_sensors: usize,
    pub k_m: Wavenumber,
}

impl ReducedForm {
    pub fn new(proj: &Backprojector) -> Self {
        let q = proj.residual_form();
        let eig = SymmetricEigen::new(q);
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > 1e-14 * lmax)
            .collect();
        let n = proj.n_sensors;
        let mut c = DMatrix::<Complex64>::zeros(keep.len(), n);
        for (r, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            for j in 0..n {
                c[(r, j)] = eig.eigenvectors[(j, i)].conj() * s;
            }
        }
        ReducedForm {
            factor: c,
            spec: proj.spec,
            radius: proj.radius,
            n_sensors: n,
            k_m: proj.k_m,
        }
    }

    pub fn rank(&self) -> usize {
        self.factor.nrows()
    }

    pub fn apply(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        &self.factor * v
    }
}

/// Everything needed to localize one data set.
#[derive(Debug, Clone)]
pub struct LocalizationProblem {
    reduced: ReducedForm,
    sensors: Vec<Point>,
    data: DVector<Complex64>,
    modes: Option<(Vec<usize>, DMatrix<Complex64>)>,
    pub window: GridSpec,
    pub settings: OptimizerSettings,
    pub starts: Vec<Point>,
}

impl LocalizationProblem {
    /// `starts` are taken from the local maxima of `|I|` of the data image.
    pub fn new(
        proj: &Backprojector,
        reduced: &ReducedForm,
        data: &FarFieldData,
        basis: Option<&ModeBasis>,
        settings: OptimizerSettings,
    ) -> Result<Self> {
        if data.samples.len() != reduced.n_sensors {
            return Err(Error::MeshMismatch(data.samples.len(), reduced.n_sensors));
        }
        if settings.starts == 0 || settings.max_evals == 0 {
            return Err(Error::InvalidInput(
                "optimizer needs at least one start and one evaluation".into(),
            ));
        }
        let image = proj.backpropagate(data)?;
        let mut starts = image.local_maxima();
        starts.truncate(settings.starts);
        let w = reduced.spec;
        let mut fill = [
            [0.0, 0.0],
            [0.5, 0.5],
            [-0.5, 0.5],
            [0.5, -0.5],
            [-0.5, -0.5],
        ]
        .into_iter()
        .cycle();
        while starts.len() < settings.starts {
            let f = fill.next().unwrap();
            starts.push([
                w.center[0] + f[0] * w.half_width,
                w.center[1] + f[1] * w.half_width,
            ]);
        }
        let modes = basis
            .filter(|b| !b.modes.is_empty())
            .map(|b| (b.modes.clone(), &reduced.factor * &b.samples));
        Ok(LocalizationProblem {
            reduced: reduced.clone(),
            sensors: sensor_ring(reduced.radius, reduced.n_sensors),
            data: reduced.apply(&DVector::from_column_slice(&data.samples)),
            modes,
            window: w,
            settings,
            starts,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.as_ref().map(|m| m.0.len()).unwrap_or(0)
    }

    /// Reduced PSF columns at `z`: sensor samples of `∇Γ(x - z)`.
    fn psf_columns(&self, z: Point) -> Result<DMatrix<Complex64>> {
        let n = self.sensors.len();
        let mut g = DMatrix::<Complex64>::zeros(n, 2);
        for (i, x) in self.sensors.iter().enumerate() {
            let d = grad_gamma(self.reduced.k_m, [x[0] - z[0], x[1] - z[1]])?;
            g[(i, 0)] = d[0];
            g[(i, 1)] = d[1];
        }
        Ok(&self.reduced.factor * g)
    }

    /// Linear least squares at fixed `z`.
    pub fn solve_linear(&self, z: Point) -> Result<LinearFit> {
        let psf = self.psf_columns(z)?;
        let mut cols: Vec<(DVector<Complex64>, CoefficientField)> = (0..2)
            .map(|c| (psf.column(c).into_owned(), self.settings.moment_field))
            .collect();
        if let Some((_, e)) = &self.modes {
            for c in 0..e.ncols() {
                cols.push((e.column(c).into_owned(), self.settings.mode_field));
            }
        }
        let (coef, residual2, regularized) = lsq(&cols, &self.data)?;
        Ok(LinearFit {
            coefficients: coef,
            residual2,
            regularized,
        })
    }

    /// Residual squared for given coefficients (moment first, then modes).
    pub fn residual2_at(&self, z: Point, coefficients: &[Complex64]) -> Result<f64> {
        let psf = self.psf_columns(z)?;
        let mut model = &psf.column(0) * coefficients[0] + &psf.column(1) * coefficients[1];
        if let Some((_, e)) = &self.modes {
            for c in 0..e.ncols() {
                model += e.column(c) * coefficients[2 + c];
            }
        }
        Ok((&self.data - model).norm_squared())
    }

    pub fn data_norm2(&self) -> f64 {
        self.data.norm_squared()
    }
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coefficients: Vec<Complex64>,
    pub residual2: f64,
    pub regularized: bool,
}

/// Least squares over real-stacked columns; complex unknowns get two real columns.
fn lsq(
    cols: &[(DVector<Complex64>, CoefficientField)],
    rhs: &DVector<Complex64>,
) -> Result<(Vec<Complex64>, f64, bool)> {
    let r = rhs.len();
    let ncols: usize = cols
        .iter()
        .map(|(_, f)| {
            if *f == CoefficientField::Complex {
                2
            } else {
                1
            }
        })
        .sum();
    let mut a = DMatrix::<f64>::zeros(2 * r, ncols);
    let mut j = 0;
    for (c, f) in cols {
        for i in 0..r {
            a[(i, j)] = c[i].re;
            a[(r + i, j)] = c[i].im;
        }
        j += 1;
        if *f == CoefficientField::Complex {
            // i · c
            for i in 0..r {
                a[(i, j)] = -c[i].im;
                a[(r + i, j)] = c[i].re;
            }
            j += 1;
        }
    }
    let b = DVector::from_iterator(
        2 * r,
        rhs.iter().map(|z| z.re).chain(rhs.iter().map(|z| z.im)),
    );
    // Column equilibration before the SVD keeps the rank test scale-free.
    let scales: Vec<f64> = (0..ncols)
        .map(|j| {
            let n = a.column(j).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let eps = 1e-10 * smax;
    let regularized = svd.singular_values.iter().any(|&s| s <= eps);
    let x = svd
        .solve(&b, eps)
        .map_err(|e| Error::InvalidInput(format!("least squares failed: {e}")))?;
    let res = (&a * &x - &b).norm_squared();
    let mut out = Vec::with_capacity(cols.len());
    let mut j = 0;
    for (_, f) in cols {
        if *f == CoefficientField::Complex {
            out.push(Complex64::new(x[j] / scales[j], x[j + 1] / scales[j + 1]));
            j += 2;
        } else {
            out.push(Complex64::new(x[j] / scales[j], 0.0));
            j += 1;
        }
    }
    if regularized {
        tracing::debug!("rank-deficient design matrix; truncated SVD solve");
    }
    Ok((out, res, regularized))
}

/// Reconstructed source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Estimated position in meters.
    pub position: Point,
    /// Unit real orientation (defined up to sign).
    pub moment: Point,
    /// Fitted complex moment.
    pub moment_complex: [Complex64; 2],
    pub modes: Vec<usize>,
    pub alphas: Vec<Complex64>,
    /// `L²(Ω̃)` norm of the image residual.
    pub residual: f64,
    pub relative_residual: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// JSON layout of a [`LocalizationResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub z_nm: Point,
    pub p: Point,
    pub angle_deg: f64,
    pub modes: Vec<usize>,
    pub alpha: Vec<[f64; 2]>,
    pub residual: f64,
    pub relative_residual: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl LocalizationResult {
    pub fn record(&self) -> LocalizationRecord {
        LocalizationRecord {
            z_nm: [self.position[0] * 1e9, self.position[1] * 1e9],
            p: self.moment,
            angle_deg: self.moment[1].atan2(self.moment[0]).to_degrees(),
            modes: self.modes.clone(),
            alpha: self.alphas.iter().map(|a| [a.re, a.im]).collect(),
            residual: self.residual,
            relative_residual: self.relative_residual,
            evaluations: self.evaluations,
            converged: self.converged,
        }
    }
}

/// Dominant real direction of `p = a + i b`: top eigenvector of `a aᵀ + b bᵀ`.
pub fn principal_direction(p: [Complex64; 2]) -> Point {
    let a = [p[0].re, p[1].re];
    let b = [p[0].im, p[1].im];
    let sxx = a[0] * a[0] + b[0] * b[0];
    let syy = a[1] * a[1] + b[1] * b[1];
    let sxy = a[0] * a[1] + b[0] * b[1];
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut d = [theta.cos(), theta.sin()];
    if d[0] < 0.0 || (d[0] == 0.0 && d[1] < 0.0) {
        d = [-d[0], -d[1]];
    }
    d
}

struct Search<'a> {
    problem: &'a LocalizationProblem,
    evals: usize,
}

impl Search<'_> {
    fn clamp(&self, z: [f64; 2]) -> [f64; 2] {
        let w = &self.problem.window;
        let c = [w.center[0] * 1e9, w.center[1] * 1e9];
        let h = w.half_width * 1e9;
        [
            z[0].clamp(c[0] - h, c[0] + h),
            z[1].clamp(c[1] - h, c[1] + h),
        ]
    }

    fn f(&mut self, z_nm: [f64; 2]) -> Result<f64> {
        self.evals += 1;
        let fit = self
            .problem
            .solve_linear([z_nm[0] * 1e-9, z_nm[1] * 1e-9])?;
        Ok(fit.residual2)
    }

    /// Bounded Nelder–Mead; returns (best point, value, converged).
    fn nelder_mead(&mut self, start: [f64; 2]) -> Result<([f64; 2], f64, bool)> {
        let s = &self.problem.settings;
        let (max_evals, xtol, step) = (s.max_evals, s.xtol_nm, s.initial_step_nm);
        let budget = self.evals + max_evals;
        let x0 = self.clamp(start);
        let mut simplex: Vec<([f64; 2], f64)> = Vec::with_capacity(3);
        for d in [[0.0, 0.0], [step, 0.0], [0.0, step]] {
            let mut x = self.clamp([x0[0] + d[0], x0[1] + d[1]]);
            if x == x0 && d != [0.0, 0.0] {
                x = self.clamp([x0[0] - d[0], x0[1] - d[1]]);
            }
            let v = self.f(x)?;
            simplex.push((x, v));
        }
        let by = |a: &([f64; 2], f64), b: &([f64; 2], f64)| a.1.partial_cmp(&b.1).unwrap();
        loop {
            simplex.sort_by(by);
            let best = simplex[0].0;
            let size = simplex[1..]
                .iter()
                .map(|(x, _)| (x[0] - best[0]).hypot(x[1] - best[1]))
                .fold(0.0f64, f64::max);
            if size < xtol {
                return Ok((best, simplex[0].1, true));
            }
            if self.evals >= budget {
                return Ok((best, simplex[0].1, false));
            }
            let c = [
                0.5 * (simplex[0].0[0] + simplex[1].0[0]),
                0.5 * (simplex[0].0[1] + simplex[1].0[1]),
            ];
            let w = simplex[2];
            let along = |t: f64| [c[0] + t * (w.0[0] - c[0]), c[1] + t * (w.0[1] - c[1])];
            let xr = self.clamp(along(-1.0));
            let fr = self.f(xr)?;
            if fr < simplex[0].1 {
                let xe = self.clamp(along(-2.0));
                let fe = self.f(xe)?;
                simplex[2] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[1].1 {
                simplex[2] = (xr, fr);
            } else {
                let (xc, fc) = if fr < w.1 {
                    let x = self.clamp(along(-0.5));
                    (x, self.f(x)?)
                } else {
                    let x = self.clamp(along(0.5));
                    (x, self.f(x)?)
                };
                if fc < w.1.min(fr) {
                    simplex[2] = (xc, fc);
                } else {
                    let b = simplex[0].0;
                    for v in simplex.iter_mut().skip(1) {
                        let x = [0.5 * (b[0] + v.0[0]), 0.5 * (b[1] + v.0[1])];
                        *v = (x, self.f(x)?);
                    }
                }
            }
        }
    }
}

fn fit(problem: &LocalizationProblem) -> Result<LocalizationResult> {
    let mut search = Search { problem, evals: 0 };
    let mut best: Option<([f64; 2], f64, bool)> = None;
    for s in &problem.starts {
        let r = search.nelder_mead([s[0] * 1e9, s[1] * 1e9])?;
        if best.map(|b| r.1 < b.1).unwrap_or(true) {
            best = Some(r);
        }
    }
    let (z_nm, _, converged) = best.expect("at least one start");
    let z = [z_nm[0] * 1e-9, z_nm[1] * 1e-9];
    let lin = problem.solve_linear(z)?;
    let p = [lin.coefficients[0], lin.coefficients[1]];
    let norm2 = problem.data_norm2();
    Ok(LocalizationResult {
        position: z,
        moment: principal_direction(p),
        moment_complex: p,
        modes: problem
            .modes
            .as_ref()
            .map(|m| m.0.clone())
            .unwrap_or_default(),
        alphas: lin.coefficients[2..].to_vec(),
        residual: lin.residual2.sqrt(),
        relative_residual: if norm2 > 0.0 {
            (lin.residual2 / norm2).sqrt()
        } else {
            0.0
        },
        evaluations: search.evals,
        converged,
    })
}

/// Fits `R(·, z) p` alone.
pub fn fit_uncorrected(problem: &LocalizationProblem) -> Result<LocalizationResult> {
    if problem.n_modes() != 0 {
        return Err(Error::InvalidInput(
            "uncorrected fit takes no mode images".into(),
        ));
    }
    fit(problem)
}

/// Fits `R(·, z) p + Σ α_n I_{e_n}`. With an empty basis this is the uncorrected fit.
pub fn fit_corrected(problem: &LocalizationProblem) -> Result<LocalizationResult> {
    fit(problem)
}

/// Adds complex Gaussian noise with per-sensor standard deviation
/// `σ₀ ‖u‖ / √N`, split equally between real and imaginary parts.
pub fn add_noise(data: &FarFieldData, sigma0: f64, seed: u64) -> Result<FarFieldData> {
    if !(sigma0 >= 0.0) || !sigma0.is_finite() {
        return Err(Error::InvalidInput(format!(
            "noise level must be >= 0, got {sigma0}"
        )));
    }
    let mut out = data.clone();
    out.meta.sigma0 = Some(sigma0);
    if sigma0 == 0.0 {
        return Ok(out);
    }
    let n = data.samples.len() as f64;
    let norm = data
        .samples
        .iter()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt();
    let sigma = sigma0 * norm / n.sqrt();
    let dist =
        Normal::new(0.0, sigma / 2f64.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for z in out.samples.iter_mut() {
        let re = dist.sample(&mut rng);
        let im = dist.sample(&mut rng);
        *z += Complex64::new(re, im);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub position_nm: f64,
    pub orientation_deg: f64,
}

/// Position error in nm and orientation error `arccos|p̂·p*|` in degrees.
pub fn error_metrics(result: &LocalizationResult, truth: &DipoleSource) -> ErrorMetrics {
    let d = [
        result.position[0] - truth.position[0],
        result.position[1] - truth.position[1],
    ];
    let c = (result.moment[0] * truth.moment[0] + result.moment[1] * truth.moment[1])
        .abs()
        .min(1.0);
    ErrorMetrics {
        position_nm: d[0].hypot(d[1]) * 1e9,
        orientation_deg: c.acos().to_degrees(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(z: Point, p: Point) -> LocalizationResult {
        LocalizationResult {
            position: z,
            moment: p,
            moment_complex: [Complex64::new(p[0], 0.0), Complex64::new(p[1], 0.0)],
            modes: vec![],
            alphas: vec![],
            residual: 0.0,
            relative_residual: 0.0,
            evaluations: 0,
            converged: true,
        }
    }

    #[test]
    fn metrics_trivial_cases() {
        let truth = DipoleSource::new([1e-8, 2e-8], [0.6, 0.8], 1e15).unwrap();
        let m = error_metrics(&result(truth.position, truth.moment), &truth);
        assert!(m.position_nm.abs() < 1e-12 && m.orientation_deg.abs() < 1e-6);
        let m = error_metrics(&result(truth.position, [-0.6, -0.8]), &truth);
        assert!(m.orientation_deg.abs() < 1e-6);
        let m = error_metrics(&result([1.3e-8, 2.4e-8], truth.moment), &truth);
        assert!((m.position_nm - 5.0).abs() < 1e-9);
    }

    #[test]
    fn principal_direction_of_phased_vector() {
        let ph = Complex64::from_polar(1.0, 0.7);
        let d = principal_direction([ph * 0.6, ph * -0.8]);
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn lsq_recovers_exact_combination() {
        let c1 = DVector::from_vec(vec![
            Complex64::new(1.0, 0.5),
            Complex64::new(0.0, 1.0),
            Complex64::new(2.0, -1.0),
        ]);
        let c2 = DVector::from_vec(vec![
            Complex64::new(0.3, 0.0),
            Complex64::new(1.0, 1.0),
            Complex64::new(-1.0, 0.2),
        ]);
        let a = Complex64::new(0.7, -0.2);
        let rhs = &c1 * a + &c2 * Complex64::new(1.5, 0.0);
        let (x, res, reg) = lsq(
            &[
                (c1, CoefficientField::Complex),
                (c2, CoefficientField::Real),
            ],
            &rhs,
        )
        .unwrap();
        assert!(!reg && res < 1e-24);
        assert!((x[0] - a).norm() < 1e-12 && (x[1] - 1.5).norm() < 1e-12);
    }
}
