//! Smooth closed curves and their uniform periodic discretization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point;

/// Shape family of a particle boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CurveKind {
    /// Polar curve `ρ(θ) = δ (2 + amplitude cos(petals θ))`.
    Flower { petals: u32, amplitude: f64 },
    /// `ζ(θ) = 2δ (e^{iθ} + coefficient e^{-3iθ})`.
    Diamond { coefficient: f64 },
    /// Semi-axes `a δ` along x₁ and `b δ` along x₂.
    Ellipse { a: f64, b: f64 },
    /// Circle of radius `δ`.
    Disk,
    /// `ζ(θ) = δ Σ_m c_m e^{imθ}`, coefficients given as `(m, re, im)`.
    Fourier { coefficients: Vec<(i32, f64, f64)> },
}

impl CurveKind {
    pub fn flower() -> Self {
        CurveKind::Flower {
            petals: 5,
            amplitude: 0.6,
        }
    }

    pub fn diamond() -> Self {
        CurveKind::Diamond { coefficient: 0.066 }
    }

    pub fn ellipse() -> Self {
        CurveKind::Ellipse { a: 1.0, b: 5.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CurveKind::Flower { .. } => "flower",
            CurveKind::Diamond { .. } => "diamond",
            CurveKind::Ellipse { .. } => "ellipse",
            CurveKind::Disk => "disk",
            CurveKind::Fourier { .. } => "fourier",
        }
    }
}

/// A closed parametric curve `θ ↦ ζ(θ)`, `θ ∈ [0, 2π)`, scaled by `scale` and
/// translated to `center`. All lengths in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricCurve {
    #[serde(flatten)]
    pub kind: CurveKind,
    pub scale: f64,
    #[serde(default)]
    pub center: Point,
}

/// Position and first two derivatives of the parametrization at one parameter value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub position: Point,
    pub d1: Point,
    pub d2: Point,
}

impl ParametricCurve {
    pub fn new(kind: CurveKind, scale: f64) -> Self {
        ParametricCurve {
            kind,
            scale,
            center: [0.0, 0.0],
        }
    }

    pub fn with_center(mut self, center: Point) -> Self {
        self.center = center;
        self
    }

    /// Validates the parameters and returns the curve ready for evaluation.
    pub fn build(self) -> Result<Self> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidInput(format!(
                "curve scale must be positive, got {}",
                self.scale
            )));
        }
        match &self.kind {
            CurveKind::Flower { petals, amplitude } => {
                if *petals == 0 || !(0.0..2.0).contains(&amplitude.abs()) {
                    return Err(Error::InvalidInput(
                        "flower needs petals >= 1 and |amplitude| < 2".into(),
                    ));
                }
            }
            CurveKind::Diamond { coefficient } => {
                // |ζ'| >= 2δ(1 - 3|c|) keeps the tangent nondegenerate
                if coefficient.abs() >= 1.0 / 3.0 {
                    return Err(Error::InvalidInput(
                        "diamond coefficient must satisfy |c| < 1/3".into(),
                    ));
                }
            }
            CurveKind::Ellipse { a, b } => {
                if !(*a > 0.0 && *b > 0.0) {
                    return Err(Error::InvalidInput(
                        "ellipse semi-axes must be positive".into(),
                    ));
                }
            }
            CurveKind::Disk => {}
            CurveKind::Fourier { coefficients } => {
                if coefficients.is_empty() {
                    return Err(Error::InvalidInput("empty Fourier coefficient list".into()));
                }
                // dense scan of |ζ'| for a degenerate tangent
                let n = 4096;
                let mut min_speed = f64::INFINITY;
                let mut max_speed: f64 = 0.0;
                for j in 0..n {
                    let t = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                    let p = self.eval(t);
                    let s = p.d1[0].hypot(p.d1[1]);
                    min_speed = min_speed.min(s);
                    max_speed = max_speed.max(s);
                }
                if min_speed <= 1e-6 * max_speed {
                    return Err(Error::InvalidInput(
                        "Fourier curve has a vanishing tangent".into(),
                    ));
                }
            }
        }
        Ok(self)
    }

    /// Position, first and second derivative with respect to θ.
    pub fn eval(&self, t: f64) -> CurvePoint {
        let d = self.scale;
        let (s, c) = t.sin_cos();
        let (pos, d1, d2) = match &self.kind {
            CurveKind::Disk => ([d * c, d * s], [-d * s, d * c], [-d * c, -d * s]),
            CurveKind::Ellipse { a, b } => {
                let (a, b) = (a * d, b * d);
                ([a * c, b * s], [-a * s, b * c], [-a * c, -b * s])
            }
            CurveKind::Flower { petals, amplitude } => {
                let m = *petals as f64;
                let (sm, cm) = (m * t).sin_cos();
                let r = d * (2.0 + amplitude * cm);
                let r1 = -d * amplitude * m * sm;
                let r2 = -d * amplitude * m * m * cm;
                (
                    [r * c, r * s],
                    [r1 * c - r * s, r1 * s + r * c],
                    [r2 * c - 2.0 * r1 * s - r * c, r2 * s + 2.0 * r1 * c - r * s],
                )
            }
            CurveKind::Diamond { coefficient } => {
                let a = *coefficient;
                let (s3, c3) = (3.0 * t).sin_cos();
                // e^{-3it} = c3 - i s3
                let k = 2.0 * d;
                (
                    [k * (c + a * c3), k * (s - a * s3)],
                    [k * (-s - 3.0 * a * s3), k * (c - 3.0 * a * c3)],
                    [k * (-c - 9.0 * a * c3), k * (-s + 9.0 * a * s3)],
                )
            }
            CurveKind::Fourier { coefficients } => {
                let mut p = [0.0; 2];
                let mut p1 = [0.0; 2];
                let mut p2 = [0.0; 2];
                for &(m, re, im) in coefficients {
                    let mf = m as f64;
                    let (sm, cm) = (mf * t).sin_cos();
                    // (re + i im) e^{imt}
                    let x = re * cm - im * sm;
                    let y = re * sm + im * cm;
                    p[0] += d * x;
                    p[1] += d * y;
                    // derivative multiplies by i m
                    p1[0] += -d * mf * y;
                    p1[1] += d * mf * x;
                    p2[0] += -d * mf * mf * x;
                    p2[1] += -d * mf * mf * y;
                }
                (p, p1, p2)
            }
        };
        CurvePoint {
            position: [pos[0] + self.center[0], pos[1] + self.center[1]],
            d1,
            d2,
        }
    }

    /// Whether `x` lies inside the curve (winding number test on a fine polygon).
    pub fn contains(&self, x: Point) -> bool {
        let n = 1024;
        let mut winding = 0.0;
        let mut prev = self.eval(0.0).position;
        for j in 1..=n {
            let t = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            let cur = self.eval(t).position;
            let a = [prev[0] - x[0], prev[1] - x[1]];
            let b = [cur[0] - x[0], cur[1] - x[1]];
            winding += (a[0] * b[1] - a[1] * b[0]).atan2(a[0] * b[0] + a[1] * b[1]);
            prev = cur;
        }
        winding.abs() > std::f64::consts::PI
    }
}

/// Uniform discretization of a closed curve at `θ_j = 2πj/M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMesh {
    pub curve: ParametricCurve,
    pub nodes: Vec<Point>,
    pub tangents: Vec<Point>,
    /// Outward unit normals (the parametrization is counter-clockwise).
    pub normals: Vec<Point>,
    pub curvature: Vec<f64>,
    /// `|ζ'(θ_j)|`.
    pub speed: Vec<f64>,
    /// Second derivative `ζ''(θ_j)`, kept for kernel diagonal limits.
    pub accel: Vec<Point>,
    pub step: f64,
}

impl BoundaryMesh {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, j: usize) -> f64 {
        self.step * j as f64
    }

    /// Trapezoidal arclength weight `h |ζ'(θ_j)|`.
    pub fn weight(&self, j: usize) -> f64 {
        self.step * self.speed[j]
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.weight(j)).collect()
    }

    pub fn perimeter(&self) -> f64 {
        self.weights().iter().sum()
    }

    /// Enclosed area from `½∮ (x dy - y dx)` on the trapezoidal rule.
    pub fn area(&self) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.len() {
            let x = self.nodes[j];
            let t = self.tangents[j];
            acc += 0.5 * (x[0] * t[1] - x[1] * t[0]) * self.weight(j);
        }
        acc
    }

    /// Largest distance between consecutive nodes.
    pub fn max_spacing(&self) -> f64 {
        self.speed.iter().fold(0.0f64, |m, &s| m.max(s)) * self.step
    }

    /// Minimal distance from `x` to the nodes together with the local spacing there.
    pub fn nearest(&self, x: Point) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for j in 0..self.len() {
            let d = (x[0] - self.nodes[j][0]).hypot(x[1] - self.nodes[j][1]);
            if d < best.0 {
                best = (d, self.weight(j));
            }
        }
        best
    }

    /// Stable key of the discretization (shape parameters + node count).
    pub fn cache_key(&self) -> String {
        format!(
            "{}-{:?}-{:e}-{:e},{:e}-M{}",
            self.curve.kind.name(),
            self.curve.kind,
            self.curve.scale,
            self.curve.center[0],
            self.curve.center[1],
            self.len()
        )
    }
}

/// Samples `curve` at `M` uniformly spaced parameter values.
pub fn discretize(curve: &ParametricCurve, m: usize) -> Result<BoundaryMesh> {
    if m < 16 || m % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "node count must be even and >= 16, got {m}"
        )));
    }
    let step = 2.0 * std::f64::consts::PI / m as f64;
    let mut mesh = BoundaryMesh {
        curve: curve.clone(),
        nodes: Vec::with_capacity(m),
        tangents: Vec::with_capacity(m),
        normals: Vec::with_capacity(m),
        curvature: Vec::with_capacity(m),
        speed: Vec::with_capacity(m),
        accel: Vec::with_capacity(m),
        step,
    };
    for j in 0..m {
        let p = curve.eval(step * j as f64);
        let speed = p.d1[0].hypot(p.d1[1]);
        if !(speed > 0.0) {
            return Err(Error::InvalidInput(format!(
                "degenerate tangent at node {j}"
            )));
        }
        let t = [p.d1[0] / speed, p.d1[1] / speed];
        let cross = p.d1[0] * p.d2[1] - p.d1[1] * p.d2[0];
        mesh.nodes.push(p.position);
        mesh.tangents.push(t);
        mesh.normals.push([t[1], -t[0]]);
        mesh.curvature.push(cross / speed.powi(3));
        mesh.speed.push(speed);
        mesh.accel.push(p.d2);
    }
    Ok(mesh)
}
