//! Neumann–Poincaré spectrum in `H*(∂D)`, the Drude permittivity, the contrast
//! `λ(ω)`, spectral denominators `τ_n(ω)` and plasmonic resonance frequencies.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundaryMesh;
use crate::kernels::Wavenumber;
use crate::potentials::{
    eval_single_layer_offboundary, BoundaryOperator, HStarMetric, StaticOperators,
};
use crate::Point;

pub const EPS0: f64 = 8.854_187_128e-12;
pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;

/// Lossy Drude particle in a homogeneous background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrudeMedium {
    pub omega_p: f64,
    pub tau: f64,
    pub eps0: f64,
    pub eps_m: f64,
    pub mu_m: f64,
}

impl Default for DrudeMedium {
    fn default() -> Self {
        DrudeMedium {
            omega_p: 2.0e15,
            tau: 1.0e-14,
            eps0: EPS0,
            eps_m: EPS0,
            mu_m: MU0,
        }
    }
}

impl DrudeMedium {
    /// `k_m = ω √(ε_m μ_m)`.
    pub fn k_m(&self, omega: f64) -> Result<Wavenumber> {
        Wavenumber::real(omega * (self.eps_m * self.mu_m).sqrt())
    }

    /// `k_D = ω √(ε_D μ_m)`, principal branch.
    pub fn k_d(&self, omega: f64) -> Result<Wavenumber> {
        let eps = drude_epsilon(self, omega)?;
        Wavenumber::new(omega * (eps * self.mu_m).sqrt())
    }
}

/// `ε_D(ω) = ε₀ (1 - ω_p² / (ω (ω + i/τ)))`.
pub fn drude_epsilon(medium: &DrudeMedium, omega: f64) -> Result<Complex64> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::InvalidInput(format!(
            "frequency must be positive, got {omega}"
        )));
    }
    let den = Complex64::new(omega, 0.0) * Complex64::new(omega, 1.0 / medium.tau);
    Ok(medium.eps0 * (1.0 - medium.omega_p * medium.omega_p / den))
}

/// `λ(ω) = (ε_m + ε_D) / (2 (ε_m - ε_D))`.
pub fn contrast_lambda(medium: &DrudeMedium, omega: f64) -> Result<Complex64> {
    let eps = drude_epsilon(medium, omega)?;
    contrast_from_eps(medium.eps_m, eps)
}

pub fn contrast_from_eps(eps_m: f64, eps_d: Complex64) -> Result<Complex64> {
    let den = 2.0 * (eps_m - eps_d);
    if den.norm() == 0.0 {
        return Err(Error::InvalidInput("ε_D = ε_m: no contrast".into()));
    }
    Ok((eps_m + eps_d) / den)
}

/// Eigenvalues and `H*`-orthonormal eigen-densities of the static `K*_D`.
///
/// Index 0 holds `λ₀ = 1/2`; the remaining modes are sorted by decreasing `|λ_n|`.
/// Within a group of equal `|λ|` negative and positive eigenvalues alternate,
/// negative first.
#[derive(Debug, Clone)]
pub struct NpSpectrum {
    pub eigenvalues: Vec<f64>,
    pub densities: Vec<Vec<f64>>,
    pub metric: HStarMetric,
    pub n_eig: usize,
}

impl NpSpectrum {
    pub fn lambda(&self, n: usize) -> Result<f64> {
        self.eigenvalues
            .get(n)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("mode {n} not retained")))
    }

    pub fn density(&self, n: usize) -> Result<&[f64]> {
        self.densities
            .get(n)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("mode {n} not retained")))
    }

    pub fn density_complex(&self, n: usize) -> Result<Vec<Complex64>> {
        Ok(self
            .density(n)?
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect())
    }

    /// Eigenvalue records for export.
    pub fn records(&self) -> Vec<EigenRecord> {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(n, &lambda)| EigenRecord { mode: n, lambda })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenRecord {
    pub mode: usize,
    pub lambda: f64,
}

const GROUP_TOL: f64 = 1e-7;

/// Orders eigenvalues by decreasing modulus, interleaving signs within ties.
pub fn order_modes(lambdas: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lambdas.len()).collect();
    idx.sort_by(|&a, &b| {
        lambdas[b]
            .abs()
            .partial_cmp(&lambdas[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = Vec::with_capacity(idx.len());
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len()
            && (lambdas[idx[j + 1]].abs() - lambdas[idx[i]].abs()).abs() < GROUP_TOL
        {
            j += 1;
        }
        let group = &idx[i..=j];
        let neg: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&g| lambdas[g] < 0.0)
            .collect();
        let pos: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&g| lambdas[g] >= 0.0)
            .collect();
        for a in 0..neg.len().max(pos.len()) {
            if let Some(&g) = neg.get(a) {
                out.push(g);
            }
            if let Some(&g) = pos.get(a) {
                out.push(g);
            }
        }
        i = j + 1;
    }
    out
}

/// Symmetric eigensolve of `K*` in the `H*` metric.
pub fn eig_np(
    static_np: &BoundaryOperator,
    metric: &HStarMetric,
    n_eig: usize,
) -> Result<NpSpectrum> {
    let m = metric.size();
    if static_np.size() != m {
        return Err(Error::MeshMismatch(static_np.size(), m));
    }
    if n_eig + 1 > m {
        return Err(Error::InvalidInput(format!(
            "cannot retain {n_eig} modes from {m} nodes"
        )));
    }
    let k = static_np.real_matrix();
    let chol = metric
        .gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Spectrum("H* Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    // A = Lᵀ K L⁻ᵀ = Lᵀ (L⁻¹ Kᵀ)ᵀ
    let y = l
        .solve_lower_triangular(&k.transpose())
        .ok_or_else(|| Error::Spectrum("singular Cholesky factor".into()))?;
    let a = l.transpose() * y.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let lt = l.transpose();
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();

    for &v in &values {
        if v > 0.5 + 1e-4 || v <= -0.5 - 1e-4 {
            return Err(Error::Spectrum(format!(
                "eigenvalue {v} outside (-1/2, 1/2]; refine the mesh"
            )));
        }
    }
    let i0 = (0..m)
        .min_by(|&a, &b| {
            (values[a] - 0.5)
                .abs()
                .partial_cmp(&(values[b] - 0.5).abs())
                .unwrap()
        })
        .unwrap();
    if (values[i0] - 0.5).abs() > 1e-6 {
        return Err(Error::Spectrum(format!(
            "no eigenvalue within 1e-6 of 1/2 (closest {})",
            values[i0]
        )));
    }
    let rest: Vec<usize> = (0..m).filter(|&i| i != i0).collect();
    let rest_vals: Vec<f64> = rest.iter().map(|&i| values[i]).collect();
    let order: Vec<usize> = std::iter::once(i0)
        .chain(order_modes(&rest_vals).into_iter().map(|o| rest[o]))
        .take(n_eig + 1)
        .collect();

    let mut eigenvalues = Vec::with_capacity(order.len());
    let mut densities = Vec::with_capacity(order.len());
    for &i in &order {
        let yv: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        let phi = lt
            .solve_upper_triangular(&yv)
            .ok_or_else(|| Error::Spectrum("singular Cholesky factor".into()))?;
        let mut phi: Vec<f64> = phi.as_slice().to_vec();
        let pivot = phi
            .iter()
            .enumerate()
            .max_by(|a, b| {
                a.1.abs()
                    .partial_cmp(&b.1.abs())
                    .unwrap()
                    .then(b.0.cmp(&a.0))
            })
            .map(|(j, _)| j)
            .unwrap();
        if phi[pivot] < 0.0 {
            phi.iter_mut().for_each(|x| *x = -*x);
        }
        eigenvalues.push(values[i]);
        densities.push(phi);
    }
    Ok(NpSpectrum {
        eigenvalues,
        densities,
        metric: metric.clone(),
        n_eig,
    })
}

/// Builds the static operators, the metric and the spectrum of `mesh`.
pub fn compute_spectrum(
    mesh: &BoundaryMesh,
    n_eig: usize,
) -> Result<(NpSpectrum, StaticOperators)> {
    let (metric, ops) = HStarMetric::build(mesh)?;
    let spec = eig_np(&ops.np_adjoint, &metric, n_eig)?;
    Ok((spec, ops))
}

/// `‖G K - Kᵀ G‖ / ‖G‖`.
pub fn self_adjointness_residual(static_np: &BoundaryOperator, metric: &HStarMetric) -> f64 {
    let k: DMatrix<f64> = static_np.real_matrix();
    let g = &metric.gram;
    (g * &k - k.transpose() * g).norm() / g.norm()
}

/// Supplies the higher-order term `(ωδ/c)² ln(ωδ/c) τ_{n,1}` of `τ_n`.
pub trait TauCorrection: Send + Sync {
    fn correction(&self, n: usize, omega: f64) -> Complex64;
}

/// `τ_n(ω) = (1/ε_D - 1/ε_m)(λ(ω) - λ_n)` plus the optional correction.
pub fn tau_n(
    spectrum: &NpSpectrum,
    medium: &DrudeMedium,
    omega: f64,
    n: usize,
    correction: Option<&dyn TauCorrection>,
) -> Result<Complex64> {
    let lambda_n = spectrum.lambda(n)?;
    tau_leading(medium, omega, lambda_n).map(|t| {
        t + correction
            .map(|c| c.correction(n, omega))
            .unwrap_or_default()
    })
}

pub fn tau_leading(medium: &DrudeMedium, omega: f64, lambda_n: f64) -> Result<Complex64> {
    let eps = drude_epsilon(medium, omega)?;
    let pre = eps.inv() - 1.0 / medium.eps_m;
    if pre.norm() == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    Ok(pre * (contrast_from_eps(medium.eps_m, eps)? - lambda_n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceEntry {
    pub mode: usize,
    pub lambda: f64,
    pub omega: f64,
    pub tau_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceTable {
    pub entries: Vec<ResonanceEntry>,
    /// Modes whose resonance lies outside the scanned interval.
    pub omitted: Vec<usize>,
}

impl ResonanceTable {
    pub fn entry(&self, mode: usize) -> Option<&ResonanceEntry> {
        self.entries.iter().find(|e| e.mode == mode)
    }
}

/// Solves `Re λ(ω) = λ_n` by bisection on `[lo, hi]`.
pub fn resonance_frequency(
    medium: &DrudeMedium,
    lambda_n: f64,
    lo: f64,
    hi: f64,
) -> Result<Option<f64>> {
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!(
            "invalid frequency range [{lo}, {hi}]"
        )));
    }
    let f = |w: f64| -> Result<f64> { Ok(contrast_lambda(medium, w)?.re - lambda_n) };
    let (mut a, mut b) = (lo, hi);
    let (mut fa, fb) = (f(a)?, f(b)?);
    if fa * fb > 0.0 {
        return Ok(None);
    }
    for _ in 0..200 {
        let c = 0.5 * (a + b);
        if c <= a || c >= b {
            break;
        }
        let fc = f(c)?;
        if fc == 0.0 {
            return Ok(Some(c));
        }
        if fa * fc < 0.0 {
            b = c;
        } else {
            a = c;
            fa = fc;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

/// Resonances of modes `1..` within `range`; mode 0 carries no plasmon.
pub fn find_resonances(
    spectrum: &NpSpectrum,
    medium: &DrudeMedium,
    range: (f64, f64),
) -> Result<ResonanceTable> {
    let mut entries = Vec::new();
    let mut omitted = Vec::new();
    for (n, &lambda) in spectrum.eigenvalues.iter().enumerate().skip(1) {
        match resonance_frequency(medium, lambda, range.0, range.1)? {
            Some(omega) => entries.push(ResonanceEntry {
                mode: n,
                lambda,
                omega,
                tau_abs: tau_leading(medium, omega, lambda)?.norm(),
            }),
            None => {
                tracing::info!(mode = n, lambda, "resonance outside the frequency range");
                omitted.push(n);
            }
        }
    }
    Ok(ResonanceTable { entries, omitted })
}

/// Radiating mode `e_n(x) = S^{k_m}_D[φ_n](x)` at a point outside the particle.
pub fn mode_field(
    spectrum: &NpSpectrum,
    mesh: &BoundaryMesh,
    k_m: Wavenumber,
    n: usize,
    x: Point,
) -> Result<Complex64> {
    let phi = spectrum.density_complex(n)?;
    eval_single_layer_offboundary(mesh, k_m, &phi, x)
}
