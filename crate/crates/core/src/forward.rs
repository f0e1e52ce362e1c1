//! Transmission problem for a dipole source, far-field measurement and the truncated
//! modal expansion used to cross-check it.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BoundaryMesh, ParametricCurve};
use crate::kernels::{grad_gamma, hess_gamma, Wavenumber};
use crate::potentials::{
    assemble_np_adjoint, assemble_single_layer, hstar_inner, single_layer_eval_matrix,
};
use crate::spectrum::{drude_epsilon, tau_leading, DrudeMedium, NpSpectrum};
use crate::Point;

/// Point dipole `p* · ∇Γ(· - z*)` at frequency `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoleSource {
    pub position: Point,
    pub moment: Point,
    pub omega: f64,
}

impl DipoleSource {
    /// `moment` is normalized to unit length.
    pub fn new(position: Point, moment: Point, omega: f64) -> Result<Self> {
        let n = moment[0].hypot(moment[1]);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidInput("dipole moment must be nonzero".into()));
        }
        if !(omega > 0.0) {
            return Err(Error::InvalidInput(format!(
                "frequency must be positive, got {omega}"
            )));
        }
        if !position.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("dipole position must be finite".into()));
        }
        Ok(DipoleSource {
            position,
            moment: [moment[0] / n, moment[1] / n],
            omega,
        })
    }
}

/// `u^in(x) = ∇Γ^{k_m}(x - z*) · p*`.
pub fn incident_field(source: &DipoleSource, k_m: Wavenumber, x: Point) -> Result<Complex64> {
    let g = grad_gamma(k_m, sub(x, source.position))?;
    Ok(g[0] * source.moment[0] + g[1] * source.moment[1])
}

/// `ν(x)ᵀ D²Γ^{k_m}(x - z*) p*`.
pub fn incident_normal_derivative(
    source: &DipoleSource,
    k_m: Wavenumber,
    x: Point,
    normal: Point,
) -> Result<Complex64> {
    let h = hess_gamma(k_m, sub(x, source.position))?;
    let p = source.moment;
    Ok(normal[0] * (h[0][0] * p[0] + h[0][1] * p[1])
        + normal[1] * (h[1][0] * p[0] + h[1][1] * p[1]))
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// Interior and exterior single-layer densities solving the transmission system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiePair {
    /// Interior density `Φ`, `u = S^{k_D}[Φ]` in `D`.
    pub phi: Vec<Complex64>,
    /// Exterior density `Ψ`, `u = u^in + S^{k_m}[Ψ]` outside `D`.
    pub psi: Vec<Complex64>,
    pub residual: f64,
    pub condition_estimate: f64,
}

const CONDITION_LIMIT: f64 = 1e12;

/// Factorized transmission operator at one frequency, reusable across sources.
pub struct TransmissionSolver {
    pub mesh: BoundaryMesh,
    pub medium: DrudeMedium,
    pub omega: f64,
    pub k_m: Wavenumber,
    pub k_d: Wavenumber,
    pub eps_d: Complex64,
    system: DMatrix<Complex64>,
    lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    s_d_lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    k_d_star: DMatrix<Complex64>,
    row_scale: f64,
    pub condition_estimate: f64,
}

impl TransmissionSolver {
    pub fn new(mesh: &BoundaryMesh, medium: &DrudeMedium, omega: f64) -> Result<Self> {
        let eps_d = drude_epsilon(medium, omega)?;
        if eps_d.im == 0.0 {
            return Err(Error::InvalidInput(
                "lossless particle: Im ε_D must be nonzero".into(),
            ));
        }
        let k_m = medium.k_m(omega)?;
        let k_d = medium.k_d(omega)?;
        let m = mesh.len();
        let s_m = assemble_single_layer(mesh, k_m).matrix;
        let s_d = assemble_single_layer(mesh, k_d).matrix;
        let k_m_star = assemble_np_adjoint(mesh, k_m).matrix;
        let k_d_star = assemble_np_adjoint(mesh, k_d).matrix;
        // Equilibrate the two block rows: the first scales like the particle size, the
        // second is multiplied through by ε_m.
        let row_scale = 1.0 / mesh.curve.scale;
        let ratio = Complex64::new(medium.eps_m, 0.0) / eps_d;
        let half = Complex64::new(0.5, 0.0);
        let mut a = DMatrix::<Complex64>::zeros(2 * m, 2 * m);
        for i in 0..m {
            for j in 0..m {
                let id = if i == j {
                    half
                } else {
                    Complex64::new(0.0, 0.0)
                };
                a[(i, j)] = s_m[(i, j)] * row_scale;
                a[(i, m + j)] = -s_d[(i, j)] * row_scale;
                a[(m + i, j)] = id + k_m_star[(i, j)];
                a[(m + i, m + j)] = (id - k_d_star[(i, j)]) * ratio;
            }
        }
        let lu = a.clone().lu();
        let condition_estimate = condition_1norm(&a, &lu);
        if !condition_estimate.is_finite() || condition_estimate > CONDITION_LIMIT {
            return Err(Error::IllConditioned(condition_estimate));
        }
        Ok(TransmissionSolver {
            mesh: mesh.clone(),
            medium: *medium,
            omega,
            k_m,
            k_d,
            eps_d,
            system: a,
            lu,
            s_d_lu: s_d.lu(),
            k_d_star,
            row_scale,
            condition_estimate,
        })
    }

    fn check_source(&self, source: &DipoleSource) -> Result<()> {
        if (source.omega - self.omega).abs() > 1e-12 * self.omega {
            return Err(Error::InvalidInput(format!(
                "source frequency {} differs from solver frequency {}",
                source.omega, self.omega
            )));
        }
        if self.mesh.curve.contains(source.position) {
            return Err(Error::InvalidInput(
                "dipole lies inside the particle".into(),
            ));
        }
        let (d, _) = self.mesh.nearest(source.position);
        if d == 0.0 {
            return Err(Error::InvalidInput("dipole lies on the boundary".into()));
        }
        Ok(())
    }

    fn incident_on_boundary(
        &self,
        source: &DipoleSource,
    ) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let mesh = &self.mesh;
        let mut u = Vec::with_capacity(mesh.len());
        let mut du = Vec::with_capacity(mesh.len());
        for j in 0..mesh.len() {
            u.push(incident_field(source, self.k_m, mesh.nodes[j])?);
            du.push(incident_normal_derivative(
                source,
                self.k_m,
                mesh.nodes[j],
                mesh.normals[j],
            )?);
        }
        Ok((u, du))
    }

    pub fn solve(&self, source: &DipoleSource) -> Result<BiePair> {
        self.check_source(source)?;
        let m = self.mesh.len();
        let (u, du) = self.incident_on_boundary(source)?;
        let mut b = DVector::<Complex64>::zeros(2 * m);
        for i in 0..m {
            b[i] = -u[i] * self.row_scale;
            b[m + i] = -du[i];
        }
        let x = self
            .lu
            .solve(&b)
            .ok_or(Error::IllConditioned(f64::INFINITY))?;
        let residual = (&self.system * &x - &b).norm() / b.norm();
        Ok(BiePair {
            psi: x.rows(0, m).iter().copied().collect(),
            phi: x.rows(m, m).iter().copied().collect(),
            residual,
            condition_estimate: self.condition_estimate,
        })
    }

    /// Boundary data `F` of the modal expansion:
    /// `-(1/ε_m) ∂_ν u^in - (1/ε_D)(½ - K^{k_D,*})(S^{k_D})⁻¹[u^in]`.
    pub fn modal_forcing(&self, source: &DipoleSource) -> Result<Vec<Complex64>> {
        self.check_source(source)?;
        let m = self.mesh.len();
        let (u, du) = self.incident_on_boundary(source)?;
        let y = self
            .s_d_lu
            .solve(&DVector::from_vec(u))
            .ok_or(Error::IllConditioned(f64::INFINITY))?;
        let ky = &self.k_d_star * &y;
        let inv_em = 1.0 / self.medium.eps_m;
        let inv_ed = self.eps_d.inv();
        Ok((0..m)
            .map(|i| -du[i] * inv_em - (y[i] * 0.5 - ky[i]) * inv_ed)
            .collect())
    }
}

/// Hager–Higham estimate of `‖A‖₁ ‖A⁻¹‖₁`.
fn condition_1norm(
    a: &DMatrix<Complex64>,
    lu: &nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
) -> f64 {
    let n = a.nrows();
    let norm_a = (0..n)
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut x = DVector::from_element(n, Complex64::new(1.0 / n as f64, 0.0));
    let mut est = 0.0;
    let adj_lu = a.adjoint().lu();
    for _ in 0..5 {
        let Some(y) = lu.solve(&x) else {
            return f64::INFINITY;
        };
        let ny: f64 = y.iter().map(|z| z.norm()).sum();
        if ny <= est {
            break;
        }
        est = ny;
        let xi = y.map(|z| {
            if z.norm() > 0.0 {
                z / z.norm()
            } else {
                Complex64::new(1.0, 0.0)
            }
        });
        let Some(w) = adj_lu.solve(&xi) else {
            return f64::INFINITY;
        };
        let (jmax, _) =
            w.iter().enumerate().fold(
                (0, 0.0),
                |acc, (j, z)| if z.norm() > acc.1 { (j, z.norm()) } else { acc },
            );
        x = DVector::zeros(n);
        x[jmax] = Complex64::new(1.0, 0.0);
    }
    est * norm_a
}

/// Solves the transmission system for one source.
pub fn solve_transmission(
    mesh: &BoundaryMesh,
    medium: &DrudeMedium,
    source: &DipoleSource,
) -> Result<BiePair> {
    TransmissionSolver::new(mesh, medium, source.omega)?.solve(source)
}

/// Sensor positions `R (cos θ_i, sin θ_i)`, `θ_i = 2πi/N`.
pub fn sensor_ring(radius: f64, n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            [radius * t.cos(), radius * t.sin()]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarFieldMeta {
    pub omega: f64,
    pub radius: f64,
    pub n_sensors: usize,
    pub sigma0: Option<f64>,
    pub shape: Option<ParametricCurve>,
    pub z_true: Option<Point>,
    pub p_true: Option<Point>,
}

/// Complex field samples on the uniform sensor ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarFieldData {
    pub samples: Vec<Complex64>,
    pub meta: FarFieldMeta,
}

impl FarFieldData {
    pub fn sensors(&self) -> Vec<Point> {
        sensor_ring(self.meta.radius, self.meta.n_sensors)
    }

    pub fn angles(&self) -> Vec<f64> {
        let n = self.meta.n_sensors;
        (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
    }

    /// `2πR/N`.
    pub fn weight(&self) -> f64 {
        2.0 * PI * self.meta.radius / self.meta.n_sensors as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["angle", "re", "im"]).map_err(csv_err)?;
        for (t, u) in self.angles().iter().zip(&self.samples) {
            wr.write_record([
                format!("{t:.17e}"),
                format!("{:.17e}", u.re),
                format!("{:.17e}", u.im),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads samples from CSV; the metadata comes from the sidecar.
    pub fn read_csv<R: Read>(r: R, meta: FarFieldMeta) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut samples = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::InvalidInput("short CSV row".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(e.to_string()))
            };
            samples.push(Complex64::new(parse(1)?, parse(2)?));
        }
        if samples.len() != meta.n_sensors {
            return Err(Error::InvalidInput(format!(
                "expected {} samples, found {}",
                meta.n_sensors,
                samples.len()
            )));
        }
        Ok(FarFieldData { samples, meta })
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(f, &self.meta)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: FarFieldMeta =
            serde_json::from_reader(std::fs::File::open(dir.join(format!("{stem}.json")))?)?;
        Self::read_csv(std::fs::File::open(dir.join(format!("{stem}.csv")))?, meta)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// `u(x_i) = u^in(x_i) + S^{k_m}[Ψ](x_i)` on `N` sensors at radius `R`.
pub fn measure(
    solver: &TransmissionSolver,
    source: &DipoleSource,
    pair: &BiePair,
    radius: f64,
    n_sensors: usize,
) -> Result<FarFieldData> {
    if n_sensors == 0 {
        return Err(Error::InvalidInput("no sensors".into()));
    }
    let xs = sensor_ring(radius, n_sensors);
    let e = single_layer_eval_matrix(&solver.mesh, solver.k_m, &xs)?;
    let scat = e * DVector::from_column_slice(&pair.psi);
    let mut samples = Vec::with_capacity(n_sensors);
    for (i, &x) in xs.iter().enumerate() {
        samples.push(incident_field(source, solver.k_m, x)? + scat[i]);
    }
    Ok(FarFieldData {
        samples,
        meta: FarFieldMeta {
            omega: solver.omega,
            radius,
            n_sensors,
            sigma0: None,
            shape: Some(solver.mesh.curve.clone()),
            z_true: Some(source.position),
            p_true: Some(source.moment),
        },
    })
}

/// Field of a dipole in free space on the sensor ring.
pub fn free_dipole_data(
    source: &DipoleSource,
    medium: &DrudeMedium,
    radius: f64,
    n_sensors: usize,
) -> Result<FarFieldData> {
    let k_m = medium.k_m(source.omega)?;
    let samples = sensor_ring(radius, n_sensors)
        .into_iter()
        .map(|x| incident_field(source, k_m, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(FarFieldData {
        samples,
        meta: FarFieldMeta {
            omega: source.omega,
            radius,
            n_sensors,
            sigma0: None,
            shape: None,
            z_true: Some(source.position),
            p_true: Some(source.moment),
        },
    })
}

/// Coupling coefficients `α_n = ⟨F, φ_n⟩_{H*} / τ_n(ω)` for modes `modes`.
pub fn compute_coupling(
    spectrum: &NpSpectrum,
    solver: &TransmissionSolver,
    source: &DipoleSource,
    modes: &[usize],
) -> Result<Vec<Complex64>> {
    let f = solver.modal_forcing(source)?;
    modes
        .iter()
        .map(|&n| {
            let phi = spectrum.density_complex(n)?;
            let tau = tau_leading(&solver.medium, solver.omega, spectrum.lambda(n)?)?;
            let natural = tau.norm() * solver.medium.eps_m;
            if natural < 1e-14 {
                return Err(Error::ResonantDivergence {
                    index: n,
                    magnitude: natural,
                });
            }
            Ok(hstar_inner(&spectrum.metric, &f, &phi)? / tau)
        })
        .collect()
}

/// Truncated expansion `u^in + Σ_{n=1}^{N} α_n e_n` at the points `xs`.
pub fn modal_field(
    spectrum: &NpSpectrum,
    solver: &TransmissionSolver,
    source: &DipoleSource,
    n_modes: usize,
    xs: &[Point],
) -> Result<Vec<Complex64>> {
    let modes: Vec<usize> = (1..=n_modes).collect();
    let alpha = compute_coupling(spectrum, solver, source, &modes)?;
    let mut out = xs
        .iter()
        .map(|&x| incident_field(source, solver.k_m, x))
        .collect::<Result<Vec<_>>>()?;
    if n_modes == 0 {
        return Ok(out);
    }
    let e = single_layer_eval_matrix(&solver.mesh, solver.k_m, xs)?;
    let mut density = vec![Complex64::new(0.0, 0.0); solver.mesh.len()];
    for (a, &n) in alpha.iter().zip(&modes) {
        for (d, p) in density.iter_mut().zip(spectrum.density(n)?) {
            *d += a * p;
        }
    }
    let scat = e * DVector::from_vec(density);
    for (o, s) in out.iter_mut().zip(scat.iter()) {
        *o += s;
    }
    Ok(out)
}

/// Relative `ℓ²` distance `‖a - b‖ / ‖b‖`.
pub fn relative_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{discretize, CurveKind};

    fn unit_disk_mesh(m: usize, scale: f64) -> BoundaryMesh {
        let c = ParametricCurve::new(CurveKind::Disk, scale)
            .build()
            .unwrap();
        discretize(&c, m).unwrap()
    }

    #[test]
    fn no_contrast_means_no_scattering() {
        let mesh = unit_disk_mesh(64, 1e-8);
        // ω_p = 0 gives ε_D = ε₀ = ε_m; keep a tiny loss so the system is admissible.
        let medium = DrudeMedium {
            omega_p: 1e-3,
            ..DrudeMedium::default()
        };
        let src = DipoleSource::new([3e-8, 1e-8], [1.0, 1.0], 1.5e15).unwrap();
        let pair = solve_transmission(&mesh, &medium, &src).unwrap();
        let scale = pair.phi.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(pair.psi.iter().all(|z| z.norm() < 1e-8 * scale));
    }

    #[test]
    fn incident_field_is_dipole_derivative() {
        let k = Wavenumber::real(2.0).unwrap();
        let src = DipoleSource::new([0.1, -0.2], [0.6, 0.8], 1.0).unwrap();
        let x = [1.3, 0.4];
        let h = 1e-5;
        let g = |z: Point| crate::kernels::gamma(k, sub(x, z)).unwrap();
        let zp = [src.position[0] + h * 0.6, src.position[1] + h * 0.8];
        let zm = [src.position[0] - h * 0.6, src.position[1] - h * 0.8];
        let fd = -(g(zp) - g(zm)) / (2.0 * h);
        assert!((incident_field(&src, k, x).unwrap() - fd).norm() < 1e-8);
        assert!(incident_field(&src, k, src.position).is_err());
    }

    #[test]
    fn rejects_bad_sources() {
        assert!(DipoleSource::new([0.0, 0.0], [0.0, 0.0], 1.0).is_err());
        assert!(DipoleSource::new([0.0, 0.0], [1.0, 0.0], 0.0).is_err());
        let mesh = unit_disk_mesh(32, 1e-8);
        let src = DipoleSource::new([0.0, 0.0], [1.0, 0.0], 1.5e15).unwrap();
        assert!(solve_transmission(&mesh, &DrudeMedium::default(), &src).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let src = DipoleSource::new([1e-8, 0.0], [0.0, 1.0], 1.5e15).unwrap();
        let d = free_dipole_data(&src, &DrudeMedium::default(), 3e-5, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path(), "ff").unwrap();
        let back = FarFieldData::load(dir.path(), "ff").unwrap();
        assert_eq!(back, d);
    }
}
