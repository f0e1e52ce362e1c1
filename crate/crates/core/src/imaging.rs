//! Back-propagation imaging functional, point-spread kernel and mode images.
//!
//! `I(z) = ∫_{∂B_R} conj(∇_z Γ^{k_m}(x - z)) u(x) dσ(x)` is discretized with the
//! trapezoidal rule on the uniform sensor ring, so every image is `B u` for one
//! precomputed back-projection matrix `B` (two rows per grid point).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

use crate::bessel::bessel_j01;
use crate::error::{Error, Result};
use crate::forward::{sensor_ring, FarFieldData};
use crate::geometry::BoundaryMesh;
use crate::kernels::{grad_gamma, Wavenumber};
use crate::potentials::{read_dump, single_layer_eval_matrix};
use crate::spectrum::NpSpectrum;
use crate::{CVec2, Point};

/// Uniform square grid centred at `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: Point,
    pub half_width: f64,
    pub points_per_side: usize,
}

impl Default for GridSpec {
    /// 61 × 61 points over a 300 nm × 300 nm window.
    fn default() -> Self {
        GridSpec {
            center: [0.0, 0.0],
            half_width: 150e-9,
            points_per_side: 61,
        }
    }
}

impl GridSpec {
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_side - 1) as f64
    }

    pub fn axis(&self, c: usize) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points_per_side)
            .map(|i| self.center[c] - self.half_width + h * i as f64)
            .collect()
    }

    /// Points in row-major order (`y` outer, `x` inner).
    pub fn points(&self) -> Vec<Point> {
        let xs = self.axis(0);
        let ys = self.axis(1);
        ys.iter()
            .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_side < 2 || !(self.half_width > 0.0) {
            return Err(Error::InvalidInput(
                "grid needs >= 2 points per side and a positive width".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("grid spec serializes");
        hex_digest(json.as_bytes())
    }

    pub fn contains(&self, z: Point) -> bool {
        (z[0] - self.center[0]).abs() <= self.half_width * (1.0 + 1e-12)
            && (z[1] - self.center[1]).abs() <= self.half_width * (1.0 + 1e-12)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Complex 2-vector field on a grid. Masked points lie inside the particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub spec: GridSpec,
    pub values: Vec<CVec2>,
    pub mask: Vec<bool>,
    pub provenance: String,
}

impl ImageGrid {
    pub fn norms(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| (v[0].norm_sqr() + v[1].norm_sqr()).sqrt())
            .collect()
    }

    /// Unmasked grid point with the largest `|I|`.
    pub fn argmax(&self) -> Option<Point> {
        let pts = self.spec.points();
        self.norms()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !self.mask[*i])
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(i, _)| pts[i])
    }

    /// Local maxima of `|I|` over unmasked points, strongest first.
    pub fn local_maxima(&self) -> Vec<Point> {
        let n = self.spec.points_per_side;
        let v = self.norms();
        let pts = self.spec.points();
        let mut peaks: Vec<(f64, usize)> = Vec::new();
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                if self.mask[i] {
                    continue;
                }
                let mut is_max = true;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                        if (dx == 0 && dy == 0)
                            || jx < 0
                            || jy < 0
                            || jx >= n as i64
                            || jy >= n as i64
                        {
                            continue;
                        }
                        let j = jy as usize * n + jx as usize;
                        if !self.mask[j] && v[j] > v[i] {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    peaks.push((v[i], i));
                }
            }
        }
        peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        peaks.into_iter().map(|(_, i)| pts[i]).collect()
    }

    /// CSV with one row per grid point: `x, y` in nm, then the real and imaginary
    /// planes of both components and the mask flag.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x_nm", "y_nm", "re_x", "im_x", "re_y", "im_y", "masked"])
            .map_err(crate::forward::csv_err)?;
        for ((p, v), m) in self.spec.points().iter().zip(&self.values).zip(&self.mask) {
            wr.write_record([
                format!("{:.6}", p[0] * 1e9),
                format!("{:.6}", p[1] * 1e9),
                format!("{:.17e}", v[0].re),
                format!("{:.17e}", v[0].im),
                format!("{:.17e}", v[1].re),
                format!("{:.17e}", v[1].im),
                (*m as u8).to_string(),
            ])
            .map_err(crate::forward::csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Precomputed back-projection for one grid, sensor ring and wavenumber.
#[derive(Debug, Clone)]
pub struct Backprojector {
    pub spec: GridSpec,
    pub k_m: Wavenumber,
    pub radius: f64,
    pub n_sensors: usize,
    pub mask: Vec<bool>,
    /// `(2 × grid points) × sensors`, trapezoid weight included.
    pub matrix: DMatrix<Complex64>,
}

impl Backprojector {
    /// `mesh` supplies the particle mask; pass `None` for free space.
    pub fn new(
        spec: GridSpec,
        k_m: Wavenumber,
        radius: f64,
        n_sensors: usize,
        mesh: Option<&BoundaryMesh>,
    ) -> Result<Self> {
        spec.validate()?;
        if n_sensors == 0 || !(radius > 0.0) {
            return Err(Error::InvalidInput("empty sensor ring".into()));
        }
        let pts = spec.points();
        let xs = sensor_ring(radius, n_sensors);
        let wq = 2.0 * std::f64::consts::PI * radius / n_sensors as f64;
        let g = pts.len();
        let mut data = vec![Complex64::new(0.0, 0.0); 2 * g * n_sensors];
        // row-major rows (2p, 2p+1) for grid point p
        data.par_chunks_mut(2 * n_sensors)
            .enumerate()
            .try_for_each(|(p, rows)| -> Result<()> {
                let (rx, ry) = rows.split_at_mut(n_sensors);
                for (i, x) in xs.iter().enumerate() {
                    // conj(∇_z Γ(x - z)) = -conj(∇Γ(x - z))
                    let d = grad_gamma(k_m, [x[0] - pts[p][0], x[1] - pts[p][1]])?;
                    rx[i] = -d[0].conj() * wq;
                    ry[i] = -d[1].conj() * wq;
                }
                Ok(())
            })?;
        let mask = pts
            .iter()
            .map(|&p| mesh.map(|m| m.curve.contains(p)).unwrap_or(false))
            .collect();
        Ok(Backprojector {
            spec,
            k_m,
            radius,
            n_sensors,
            mask,
            matrix: DMatrix::from_row_slice(2 * g, n_sensors, &data),
        })
    }

    fn check(&self, samples: usize) -> Result<()> {
        if samples == 0 {
            return Err(Error::InvalidInput("empty data".into()));
        }
        if samples != self.n_sensors {
            return Err(Error::MeshMismatch(samples, self.n_sensors));
        }
        Ok(())
    }

    /// Image of arbitrary sensor samples.
    pub fn image(&self, samples: &[Complex64], provenance: &str) -> Result<ImageGrid> {
        self.check(samples.len())?;
        let v = &self.matrix * DVector::from_column_slice(samples);
        let values = (0..v.len() / 2).map(|p| [v[2 * p], v[2 * p + 1]]).collect();
        Ok(ImageGrid {
            spec: self.spec,
            values,
            mask: self.mask.clone(),
            provenance: provenance.to_string(),
        })
    }

    pub fn backpropagate(&self, data: &FarFieldData) -> Result<ImageGrid> {
        if (data.meta.radius - self.radius).abs() > 1e-12 * self.radius {
            return Err(Error::InvalidInput(
                "data radius differs from the back-projector".into(),
            ));
        }
        self.image(&data.samples, "far-field data")
    }

    /// `Σ_{unmasked p} |(B v)_p|² h²` as a Hermitian form `vᴴ Q v` on sensor space.
    pub fn residual_form(&self) -> DMatrix<Complex64> {
        let h2 = self.spec.spacing().powi(2);
        let keep: Vec<usize> = (0..self.matrix.nrows())
            .filter(|&r| !self.mask[r / 2])
            .collect();
        let b = self.matrix.select_rows(keep.iter());
        let q = b.adjoint() * b * Complex64::new(h2, 0.0);
        (&q + q.adjoint()) * Complex64::new(0.5, 0.0)
    }
}

/// One-shot back-propagation of `data` onto `spec`.
pub fn backpropagate(
    data: &FarFieldData,
    spec: GridSpec,
    mesh: Option<&BoundaryMesh>,
) -> Result<ImageGrid> {
    if data.samples.is_empty() {
        return Err(Error::InvalidInput("empty data".into()));
    }
    let k =
        Wavenumber::real(data.meta.omega * (crate::spectrum::EPS0 * crate::spectrum::MU0).sqrt())?;
    Backprojector::new(spec, k, data.meta.radius, data.meta.n_sensors, mesh)?.backpropagate(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsfMode {
    Quadrature,
    ClosedForm,
}

/// `R(y, z) = ∫_{∂B_R} conj(∇_y Γ(x - y)) ∇_z Γ(x - z)ᵀ dσ(x)`.
///
/// The closed form is the large-`R` limit
/// `(k/4) [(J₀(s) - 2J₁(s)/s) e eᵀ + (J₁(s)/s) I]`, `s = k|y - z|`, `e = (y - z)/|y - z|`.
pub fn psf_kernel(
    y: Point,
    z: Point,
    k_m: Wavenumber,
    radius: f64,
    n_sensors: usize,
    mode: PsfMode,
) -> Result<[[Complex64; 2]; 2]> {
    match mode {
        PsfMode::Quadrature => {
            let wq = 2.0 * std::f64::consts::PI * radius / n_sensors as f64;
            let mut r = [[Complex64::new(0.0, 0.0); 2]; 2];
            for x in sensor_ring(radius, n_sensors) {
                let gy = grad_gamma(k_m, [x[0] - y[0], x[1] - y[1]])?;
                let gz = grad_gamma(k_m, [x[0] - z[0], x[1] - z[1]])?;
                for a in 0..2 {
                    for b in 0..2 {
                        r[a][b] += gy[a].conj() * gz[b] * wq;
                    }
                }
            }
            Ok(r)
        }
        PsfMode::ClosedForm => {
            let k = k_m.value().re;
            let d = [y[0] - z[0], y[1] - z[1]];
            let dist = d[0].hypot(d[1]);
            let s = k * dist;
            let c = Complex64::new(k / 4.0, 0.0);
            if s < 1e-8 {
                let v = c * 0.5;
                let zero = Complex64::new(0.0, 0.0);
                return Ok([[v, zero], [zero, v]]);
            }
            let (j0, j1) = bessel_j01(Complex64::new(s, 0.0));
            let a = c * (j0 - 2.0 * j1 / s);
            let b = c * (j1 / s);
            let e = [d[0] / dist, d[1] / dist];
            Ok([
                [a * (e[0] * e[0]) + b, a * (e[0] * e[1])],
                [a * (e[1] * e[0]), a * (e[1] * e[1]) + b],
            ])
        }
    }
}

/// Radiating modes sampled on the sensor ring, with their images.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    /// Mode indices into the spectrum.
    pub modes: Vec<usize>,
    /// `sensors × modes` matrix of `e_n(x_i)`.
    pub samples: DMatrix<Complex64>,
    pub images: Vec<ImageGrid>,
    pub key: String,
}

impl ModeBasis {
    /// Basis restricted to a subset of its modes.
    pub fn subset(&self, modes: &[usize]) -> Result<ModeBasis> {
        let mut cols = Vec::new();
        for m in modes {
            let c = self
                .modes
                .iter()
                .position(|x| x == m)
                .ok_or_else(|| Error::InvalidInput(format!("mode {m} not in basis")))?;
            cols.push(c);
        }
        Ok(ModeBasis {
            modes: modes.to_vec(),
            samples: self.samples.select_columns(cols.iter()),
            images: cols.iter().map(|&c| self.images[c].clone()).collect(),
            key: format!("{}-subset{:?}", self.key, modes),
        })
    }
}

/// Key identifying a set of mode images.
pub fn mode_cache_key(
    mesh: &BoundaryMesh,
    omega: f64,
    proj: &Backprojector,
    modes: &[usize],
) -> String {
    let raw = format!(
        "{}|{:e}|{:e}|{}|{}|{:?}",
        mesh.cache_key(),
        omega,
        proj.radius,
        proj.n_sensors,
        proj.spec.hash(),
        modes
    );
    hex_digest(raw.as_bytes())
}

/// `I_{e_n}` for modes `1..=n_modes` on the back-projector's grid. With `cache_dir`,
/// sensor samples are stored as a matrix dump plus a JSON key and reused when the key
/// matches.
pub fn mode_images(
    spectrum: &NpSpectrum,
    mesh: &BoundaryMesh,
    omega: f64,
    proj: &Backprojector,
    n_modes: usize,
    cache_dir: Option<&Path>,
) -> Result<ModeBasis> {
    let modes: Vec<usize> = (1..=n_modes).collect();
    let key = mode_cache_key(mesh, omega, proj, &modes);
    let samples = match cache_dir.and_then(|d| load_cached(d, &key, proj.n_sensors, n_modes)) {
        Some(s) => s,
        None => {
            let xs = sensor_ring(proj.radius, proj.n_sensors);
            let e = single_layer_eval_matrix(mesh, proj.k_m, &xs)?;
            let mut dens = DMatrix::<Complex64>::zeros(mesh.len(), n_modes);
            for (c, &n) in modes.iter().enumerate() {
                for (r, v) in spectrum.density(n)?.iter().enumerate() {
                    dens[(r, c)] = Complex64::new(*v, 0.0);
                }
            }
            let s = e * dens;
            if let Some(d) = cache_dir {
                store_cached(d, &key, &s)?;
            }
            s
        }
    };
    let images = (0..n_modes)
        .map(|c| {
            let col: Vec<Complex64> = samples.column(c).iter().copied().collect();
            proj.image(&col, &format!("mode {}", modes[c]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeBasis {
        modes,
        samples,
        images,
        key,
    })
}

#[derive(Serialize, Deserialize)]
struct CacheKey {
    key: String,
    rows: usize,
    cols: usize,
}

fn load_cached(dir: &Path, key: &str, rows: usize, cols: usize) -> Option<DMatrix<Complex64>> {
    let meta: CacheKey =
        serde_json::from_reader(std::fs::File::open(dir.join(format!("modes-{key}.json"))).ok()?)
            .ok()?;
    if meta.key != key || meta.rows != rows || meta.cols != cols {
        return None;
    }
    let dump = read_dump(std::fs::File::open(dir.join(format!("modes-{key}.bin"))).ok()?).ok()?;
    (dump.matrix.nrows() == rows && dump.matrix.ncols() == cols).then_some(dump.matrix)
}

fn store_cached(dir: &Path, key: &str, m: &DMatrix<Complex64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::potentials::write_matrix_dump(
        std::fs::File::create(dir.join(format!("modes-{key}.bin")))?,
        "mode_samples",
        m,
    )?;
    let meta = CacheKey {
        key: key.to_string(),
        rows: m.nrows(),
        cols: m.ncols(),
    };
    serde_json::to_writer_pretty(
        std::fs::File::create(dir.join(format!("modes-{key}.json")))?,
        &meta,
    )?;
    Ok(())
}
