//! Nyström discretization of the single layer potential and the Neumann–Poincaré
//! adjoint on a [`BoundaryMesh`], together with the invertible substitute `S̃` and the
//! `H*` energy inner product.
//!
//! Singular kernels use Kress' product quadrature: the kernel is split as
//! `A(t,s) ln(4 sin²((t-s)/2)) + B(t,s)` with `A`, `B` analytic, and the logarithmic
//! factor is integrated exactly against the trigonometric interpolant.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};

use crate::bessel::{bessel_j01, hankel1_01, EULER_GAMMA};
use crate::error::{Error, Result};
use crate::geometry::BoundaryMesh;
use crate::kernels::{radial, Wavenumber};
use crate::Point;

/// What a [`BoundaryOperator`] discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum KernelTag {
    SingleLayer {
        k: Complex64,
    },
    NpAdjoint {
        k: Complex64,
    },
    /// `S̃`, built from the static single layer.
    STilde,
}

impl KernelTag {
    pub fn label(&self) -> String {
        match self {
            KernelTag::SingleLayer { k } if k.norm() == 0.0 => "single_layer_static".into(),
            KernelTag::SingleLayer { k } => format!("single_layer_k={}{:+}i", k.re, k.im),
            KernelTag::NpAdjoint { k } if k.norm() == 0.0 => "np_adjoint_static".into(),
            KernelTag::NpAdjoint { k } => format!("np_adjoint_k={}{:+}i", k.re, k.im),
            KernelTag::STilde => "s_tilde".into(),
        }
    }
}

/// Dense Nyström matrix acting on nodal density values.
#[derive(Debug, Clone)]
pub struct BoundaryOperator {
    pub matrix: DMatrix<Complex64>,
    pub tag: KernelTag,
    pub mesh_key: String,
}

impl BoundaryOperator {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, density: &[Complex64]) -> Result<Vec<Complex64>> {
        if density.len() != self.size() {
            return Err(Error::MeshMismatch(density.len(), self.size()));
        }
        let v = DVector::from_column_slice(density);
        Ok((&self.matrix * v).as_slice().to_vec())
    }

    pub fn apply_real(&self, density: &[f64]) -> Result<Vec<Complex64>> {
        let c: Vec<Complex64> = density.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.apply(&c)
    }

    /// Real part of the matrix; exact for the static kernels.
    pub fn real_matrix(&self) -> DMatrix<f64> {
        self.matrix.map(|z| z.re)
    }

    /// Writes the operator as a binary matrix dump, see [`write_matrix_dump`].
    pub fn write_dump<W: Write>(&self, w: W) -> Result<()> {
        write_matrix_dump(w, &self.tag.label(), &self.matrix)
    }
}

/// Binary matrix dump: magic `MIRAGEOP`, `u64` rows, `u64` columns, `u32` tag length,
/// the tag in UTF-8, then the entries row-major as interleaved little-endian `f64`
/// (real, imaginary).
pub fn write_matrix_dump<W: Write>(mut w: W, tag: &str, matrix: &DMatrix<Complex64>) -> Result<()> {
    let (rows, cols) = matrix.shape();
    w.write_all(b"MIRAGEOP")?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    w.write_all(&(tag.len() as u32).to_le_bytes())?;
    w.write_all(tag.as_bytes())?;
    let mut buf = Vec::with_capacity(16 * rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let z = matrix[(i, j)];
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Contents of a binary dump.
#[derive(Debug, Clone)]
pub struct MatrixDump {
    pub tag: String,
    pub matrix: DMatrix<Complex64>,
}

pub fn read_dump<R: Read>(mut r: R) -> Result<MatrixDump> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != b"MIRAGEOP" {
        return Err(Error::InvalidInput("not a matrix dump".into()));
    }
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut tag = vec![0u8; len];
    r.read_exact(&mut tag)?;
    let tag = String::from_utf8(tag).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut data = vec![0u8; 16 * rows * cols];
    r.read_exact(&mut data)?;
    let entries: Vec<Complex64> = data
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    Ok(MatrixDump {
        tag,
        matrix: DMatrix::from_row_slice(rows, cols, &entries),
    })
}

/// Kress weights `R_j` for the logarithmic factor, `j = 0..M`.
pub fn kress_weights(m: usize) -> Vec<f64> {
    let n = m / 2;
    let nf = n as f64;
    (0..m)
        .map(|j| {
            let t = 2.0 * PI * j as f64 / m as f64;
            let mut s = 0.0;
            for q in 1..n {
                s += (q as f64 * t).cos() / q as f64;
            }
            -(2.0 * PI / nf) * s - (PI / (nf * nf)) * (nf * t).cos()
        })
        .collect()
}

fn log4sin2(dt: f64) -> f64 {
    let s = (0.5 * dt).sin();
    (4.0 * s * s).ln()
}

fn diff(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn assemble_rows<F>(m: usize, row: F) -> DMatrix<Complex64>
where
    F: Fn(usize, &mut [Complex64]) + Sync,
{
    let mut data = vec![Complex64::new(0.0, 0.0); m * m];
    data.par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, r)| row(i, r));
    DMatrix::from_row_slice(m, m, &data)
}

/// `S^k_D`, boundary-to-boundary.
pub fn assemble_single_layer(mesh: &BoundaryMesh, k: Wavenumber) -> BoundaryOperator {
    let m = mesh.len();
    let rw = kress_weights(m);
    let h = mesh.step;
    let kv = k.value();
    let matrix = assemble_rows(m, |i, row| {
        let xi = mesh.nodes[i];
        for (j, out) in row.iter_mut().enumerate() {
            let sp = mesh.speed[j];
            let rij = rw[(i + m - j) % m];
            let (m1, m2) = if i == j {
                if k.is_zero() {
                    (
                        Complex64::new(1.0 / (4.0 * PI), 0.0),
                        Complex64::new(sp.ln() / (2.0 * PI), 0.0),
                    )
                } else {
                    let d = Complex64::new(0.0, -0.25)
                        + ((kv * sp * 0.5).ln() + EULER_GAMMA) / (2.0 * PI);
                    (Complex64::new(1.0 / (4.0 * PI), 0.0), d)
                }
            } else {
                let d = diff(xi, mesh.nodes[j]);
                let r = d[0].hypot(d[1]);
                let l = log4sin2(mesh.param(i) - mesh.param(j));
                if k.is_zero() {
                    let g = r.ln() / (2.0 * PI);
                    let m1 = 1.0 / (4.0 * PI);
                    (Complex64::new(m1, 0.0), Complex64::new(g - m1 * l, 0.0))
                } else {
                    let z = kv * r;
                    let (h0, _) = hankel1_01(z);
                    let (j0, _) = bessel_j01(z);
                    let g = Complex64::new(0.0, -0.25) * h0;
                    let m1 = j0 / (4.0 * PI);
                    (m1, g - m1 * l)
                }
            };
            *out = (m1 * rij + m2 * h) * sp;
        }
    });
    BoundaryOperator {
        matrix,
        tag: KernelTag::SingleLayer { k: kv },
        mesh_key: mesh.cache_key(),
    }
}

/// `K^{k,*}_D`, with kernel `∂Γ^k(x-y)/∂ν(x)`.
pub fn assemble_np_adjoint(mesh: &BoundaryMesh, k: Wavenumber) -> BoundaryOperator {
    let m = mesh.len();
    let rw = kress_weights(m);
    let h = mesh.step;
    let kv = k.value();
    let matrix = assemble_rows(m, |i, row| {
        let xi = mesh.nodes[i];
        let nu = mesh.normals[i];
        let diag = Complex64::new(mesh.curvature[i] / (4.0 * PI), 0.0);
        for (j, out) in row.iter_mut().enumerate() {
            let sp = mesh.speed[j];
            if i == j {
                *out = diag * h * sp;
                continue;
            }
            let d = diff(xi, mesh.nodes[j]);
            let r = d[0].hypot(d[1]);
            let dn = d[0] * nu[0] + d[1] * nu[1];
            if k.is_zero() {
                *out = Complex64::new(dn / (2.0 * PI * r * r) * h * sp, 0.0);
            } else {
                let z = kv * r;
                let (_, h1) = hankel1_01(z);
                let (_, j1) = bessel_j01(z);
                let full = Complex64::new(0.0, 0.25) * kv * h1 * (dn / r);
                let l1 = -kv / (4.0 * PI) * j1 * (dn / r);
                let l2 = full - l1 * log4sin2(mesh.param(i) - mesh.param(j));
                *out = (l1 * rw[(i + m - j) % m] + l2 * h) * sp;
            }
        }
    });
    BoundaryOperator {
        matrix,
        tag: KernelTag::NpAdjoint { k: kv },
        mesh_key: mesh.cache_key(),
    }
}

/// Static double layer `K_D` (the `L²` adjoint of `K*_D`), used only for the
/// Calderón check.
fn assemble_double_layer_static(mesh: &BoundaryMesh) -> DMatrix<f64> {
    let m = mesh.len();
    DMatrix::from_fn(m, m, |i, j| {
        let w = mesh.weight(j);
        if i == j {
            return mesh.curvature[j] / (4.0 * PI) * w;
        }
        let d = diff(mesh.nodes[j], mesh.nodes[i]);
        let nu = mesh.normals[j];
        let r2 = d[0] * d[0] + d[1] * d[1];
        (d[0] * nu[0] + d[1] * nu[1]) / (2.0 * PI * r2) * w
    })
}

/// Equilibrium density `φ₀`: `K*φ₀ = φ₀/2`, `∫φ₀ dσ = 1`.
pub fn equilibrium_density(mesh: &BoundaryMesh, static_np: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = mesh.len();
    let w = mesh.weights();
    let a = DMatrix::from_fn(m, m, |i, j| {
        let id = if i == j { 0.5 } else { 0.0 };
        id - static_np[(i, j)] + w[j]
    });
    let rhs = DVector::from_element(m, 1.0);
    let phi = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Spectrum("cannot isolate the eigenvalue 1/2".into()))?;
    let total: f64 = phi.iter().zip(&w).map(|(p, w)| p * w).sum();
    let phi = phi / total;
    let res = (static_np * &phi - &phi * 0.5).norm() / phi.norm();
    if res > 1e-6 {
        return Err(Error::Spectrum(format!(
            "no eigenvalue within 1e-6 of 1/2 (residual {res:e})"
        )));
    }
    Ok(phi.as_slice().to_vec())
}

/// `S̃_D = S_D - (S_D φ₀ + χ) ⟨·, χ⟩`.
pub fn assemble_s_tilde(
    mesh: &BoundaryMesh,
    static_single: &BoundaryOperator,
    phi0: &[f64],
) -> Result<BoundaryOperator> {
    let m = mesh.len();
    if phi0.len() != m || static_single.size() != m {
        return Err(Error::MeshMismatch(phi0.len(), m));
    }
    let s = static_single.real_matrix();
    let sphi = &s * DVector::from_column_slice(phi0);
    let w = mesh.weights();
    let st = DMatrix::from_fn(m, m, |i, j| s[(i, j)] - (sphi[i] + 1.0) * w[j]);
    Ok(BoundaryOperator {
        matrix: st.map(|x| Complex64::new(x, 0.0)),
        tag: KernelTag::STilde,
        mesh_key: mesh.cache_key(),
    })
}

/// Gram matrix of `⟨u, v⟩_{H*} = -⟨S̃[v], u⟩`.
#[derive(Debug, Clone)]
pub struct HStarMetric {
    pub gram: DMatrix<f64>,
    pub phi0: Vec<f64>,
    pub weights: Vec<f64>,
    pub mesh_key: String,
}

impl HStarMetric {
    /// Builds `S_D`, `K*_D`, `φ₀` and `S̃_D` at `k = 0` and the resulting Gram matrix.
    pub fn build(mesh: &BoundaryMesh) -> Result<(Self, StaticOperators)> {
        let single = assemble_single_layer(mesh, Wavenumber::ZERO);
        let np = assemble_np_adjoint(mesh, Wavenumber::ZERO);
        let k = np.real_matrix();
        let phi0 = equilibrium_density(mesh, &k)?;
        let st = assemble_s_tilde(mesh, &single, &phi0)?;
        let w = mesh.weights();
        let str_ = st.real_matrix();
        let m = mesh.len();
        let g = DMatrix::from_fn(m, m, |i, j| {
            -0.5 * (w[i] * str_[(i, j)] + w[j] * str_[(j, i)])
        });
        let metric = HStarMetric {
            gram: g,
            phi0,
            weights: w,
            mesh_key: mesh.cache_key(),
        };
        Ok((
            metric,
            StaticOperators {
                single,
                np_adjoint: np,
                s_tilde: st,
            },
        ))
    }

    pub fn size(&self) -> usize {
        self.phi0.len()
    }
}

/// Static operators produced alongside the metric.
#[derive(Debug, Clone)]
pub struct StaticOperators {
    pub single: BoundaryOperator,
    pub np_adjoint: BoundaryOperator,
    pub s_tilde: BoundaryOperator,
}

/// `⟨u, v⟩_{H*}`, linear in `u` and conjugate linear in `v`.
pub fn hstar_inner(metric: &HStarMetric, u: &[Complex64], v: &[Complex64]) -> Result<Complex64> {
    let m = metric.size();
    if u.len() != m {
        return Err(Error::MeshMismatch(u.len(), m));
    }
    if v.len() != m {
        return Err(Error::MeshMismatch(v.len(), m));
    }
    let g = &metric.gram;
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..m {
        let mut row = Complex64::new(0.0, 0.0);
        for j in 0..m {
            row += u[j] * g[(i, j)];
        }
        acc += v[i].conj() * row;
    }
    Ok(acc)
}

/// `‖S̃K* - KS̃‖_F / ‖S̃‖_F` for the static operators.
pub fn calderon_residual(mesh: &BoundaryMesh, ops: &StaticOperators) -> f64 {
    let st = ops.s_tilde.real_matrix();
    let kstar = ops.np_adjoint.real_matrix();
    let kd = assemble_double_layer_static(mesh);
    (&st * &kstar - &kd * &st).norm() / st.norm()
}

/// Evaluates `S^k_D[φ](x)` at one point off the boundary with the trapezoidal rule.
pub fn eval_single_layer_offboundary(
    mesh: &BoundaryMesh,
    k: Wavenumber,
    phi: &[Complex64],
    x: Point,
) -> Result<Complex64> {
    if phi.len() != mesh.len() {
        return Err(Error::MeshMismatch(phi.len(), mesh.len()));
    }
    check_guard(mesh, x)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, p) in phi.iter().enumerate() {
        let d = diff(x, mesh.nodes[j]);
        acc += radial(k, d[0].hypot(d[1])).value * (*p * mesh.weight(j));
    }
    Ok(acc)
}

/// Rejects points inside the particle or within five local node spacings of it.
pub fn check_guard(mesh: &BoundaryMesh, x: Point) -> Result<()> {
    let (dist, spacing) = mesh.nearest(x);
    let guard = 5.0 * spacing;
    if dist < guard || mesh.curve.contains(x) {
        return Err(Error::NearBoundary {
            distance: dist,
            guard,
        });
    }
    Ok(())
}

/// Matrix `E` with `(Eφ)_i = S^k_D[φ](x_i)` for a batch of exterior points.
pub fn single_layer_eval_matrix(
    mesh: &BoundaryMesh,
    k: Wavenumber,
    points: &[Point],
) -> Result<DMatrix<Complex64>> {
    for &x in points {
        check_guard(mesh, x)?;
    }
    let m = mesh.len();
    let n = points.len();
    let mut data = vec![Complex64::new(0.0, 0.0); n * m];
    data.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            let d = diff(points[i], mesh.nodes[j]);
            *out = radial(k, d[0].hypot(d[1])).value * mesh.weight(j);
        }
    });
    Ok(DMatrix::from_row_slice(n, m, &data))
}
