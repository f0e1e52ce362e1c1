//! Experiment configuration and runners: mode gallery, mirage, distance sweep, noise
//! sweep and mode-count table, plus the forward / image / localize primitives.
//!
//! Every runner is a pure function of the configuration (including its seed). When
//! `out` is set, artifacts are written there; each JSON file carries a
//! [`Provenance`] block and each CSV file gets a `<stem>.meta.json` sidecar.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::forward::{measure, DipoleSource, FarFieldData, TransmissionSolver};
use crate::geometry::{discretize, BoundaryMesh, CurveKind, ParametricCurve};
use crate::imaging::{hex_digest, mode_images, Backprojector, GridSpec, ImageGrid, ModeBasis};
use crate::localize::{
    add_noise, error_metrics, fit_corrected, fit_uncorrected, ErrorMetrics, LocalizationProblem,
    LocalizationRecord, LocalizationResult, OptimizerSettings, ReducedForm,
};
use crate::potentials::check_guard;
use crate::spectrum::{
    compute_spectrum, find_resonances, DrudeMedium, EigenRecord, NpSpectrum, ResonanceTable,
};
use crate::Point;

/// Physical constants; lengths in meters, frequencies in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constants {
    pub omega_p: f64,
    pub tau: f64,
    pub eps0: f64,
    pub mu0: f64,
    /// Particle length scale `δ`.
    pub delta: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            omega_p: 2.0e15,
            tau: 1.0e-14,
            eps0: 8.854187128e-12,
            mu0: 4.0 * std::f64::consts::PI * 1e-7,
            delta: 1e-8,
        }
    }
}

impl Constants {
    /// Drude particle in a background with `ε_m = ε₀`, `μ_m = μ₀`.
    pub fn medium(&self) -> DrudeMedium {
        DrudeMedium {
            omega_p: self.omega_p,
            tau: self.tau,
            eps0: self.eps0,
            eps_m: self.eps0,
            mu_m: self.mu0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Discretization {
    pub boundary_points: usize,
    pub sensors: usize,
    /// Sensor ring radius in units of `δ`.
    pub radius_delta: f64,
    /// Eigenpairs retained after `λ₀`.
    pub n_eig: usize,
    /// Imaging grid, which is also the search window.
    pub grid: GridSpec,
    /// Interval scanned for resonances, rad/s.
    pub frequency_range: [f64; 2],
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization {
            boundary_points: 256,
            sensors: 256,
            radius_delta: 3000.0,
            n_eig: 16,
            grid: GridSpec::default(),
            frequency_range: [2.0e14, 3.0e15],
        }
    }
}

/// Either a frequency in rad/s or `"resonance:n"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrequencySetting {
    Value(f64),
    Label(String),
}

impl FrequencySetting {
    fn resolve(&self, table: &ResonanceTable) -> Result<f64> {
        match self {
            FrequencySetting::Value(w) if *w > 0.0 => Ok(*w),
            FrequencySetting::Value(w) => Err(Error::Config(format!(
                "frequency must be positive, got {w}"
            ))),
            FrequencySetting::Label(s) => {
                let n: usize = s
                    .strip_prefix("resonance:")
                    .and_then(|n| n.trim().parse().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("expected a number or \"resonance:n\", got {s:?}"))
                    })?;
                table.entry(n).map(|e| e.omega).ok_or_else(|| {
                    Error::Config(format!("no resonance for mode {n} in the scanned range"))
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub position_nm: Point,
    /// Orientation; normalized on use.
    pub moment: Point,
    pub omega: FrequencySetting,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            position_nm: [18.65, 16.65],
            moment: [-1.0, 1.0],
            omega: FrequencySetting::Label("resonance:2".into()),
        }
    }
}

/// Mode basis of the corrected fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Use modes `1..=n_modes` unless `modes` is given.
    pub n_modes: usize,
    pub modes: Option<Vec<usize>>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            n_modes: 6,
            modes: None,
        }
    }
}

impl CorrectionConfig {
    pub fn mode_list(&self) -> Vec<usize> {
        self.modes
            .clone()
            .unwrap_or_else(|| (1..=self.n_modes).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalleryConfig {
    pub modes: usize,
    pub grid: GridSpec,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        GalleryConfig {
            modes: 6,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceSweepConfig {
    /// Radial offsets of the source away from its configured position, nm.
    pub offsets_nm: Vec<f64>,
}

impl Default for DistanceSweepConfig {
    fn default() -> Self {
        DistanceSweepConfig {
            offsets_nm: vec![
                0.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSweepConfig {
    /// Noise levels as fractions (0.4 = 40 %).
    pub sigma0: Vec<f64>,
    pub realizations: usize,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        NoiseSweepConfig {
            sigma0: vec![0.4, 0.6, 0.8, 1.0, 1.2, 1.5],
            realizations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeTableConfig {
    pub n_modes: Vec<usize>,
}

impl Default for ModeTableConfig {
    fn default() -> Self {
        ModeTableConfig {
            n_modes: (2..=7).collect(),
        }
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shape: CurveKind,
    pub center_nm: Point,
    pub constants: Constants,
    pub discretization: Discretization,
    pub source: SourceConfig,
    pub correction: CorrectionConfig,
    pub fit: OptimizerSettings,
    pub gallery: GalleryConfig,
    pub distance_sweep: DistanceSweepConfig,
    pub noise_sweep: NoiseSweepConfig,
    pub mode_table: ModeTableConfig,
    /// Output directory; nothing is written when absent.
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            shape: CurveKind::diamond(),
            center_nm: [0.0, 0.0],
            constants: Constants::default(),
            discretization: Discretization::default(),
            source: SourceConfig::default(),
            correction: CorrectionConfig::default(),
            fit: OptimizerSettings::default(),
            gallery: GalleryConfig::default(),
            distance_sweep: DistanceSweepConfig::default(),
            noise_sweep: NoiseSweepConfig::default(),
            mode_table: ModeTableConfig::default(),
            out: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Presets for the three particles of the mirage experiment.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        match name {
            "diamond" => {}
            "ellipse" => {
                c.shape = CurveKind::ellipse();
                c.source.moment = [0.0, 1.0];
            }
            "flower" => {
                c.shape = CurveKind::flower();
            }
            "disk" => {
                c.shape = CurveKind::Disk;
                c.source.omega = FrequencySetting::Value(1.5e15);
            }
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        }
        Ok(c)
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        hex_digest(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.discretization;
        if !(self.constants.delta > 0.0) {
            return Err(Error::Config("delta must be positive".into()));
        }
        if d.sensors == 0 || !(d.radius_delta > 0.0) {
            return Err(Error::Config(
                "sensor ring must be nonempty with positive radius".into(),
            ));
        }
        if !(d.frequency_range[0] > 0.0 && d.frequency_range[1] > d.frequency_range[0]) {
            return Err(Error::Config(
                "frequency_range must be increasing and positive".into(),
            ));
        }
        d.grid.validate()?;
        self.gallery.grid.validate()?;
        if self.correction.mode_list().contains(&0) {
            return Err(Error::Config(
                "mode 0 carries no plasmon and cannot be used for correction".into(),
            ));
        }
        if self.noise_sweep.sigma0.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }

    fn curve(&self) -> Result<ParametricCurve> {
        ParametricCurve::new(self.shape.clone(), self.constants.delta)
            .with_center([self.center_nm[0] * 1e-9, self.center_nm[1] * 1e-9])
            .build()
    }

    /// Highest mode index any runner of this config may ask for.
    fn modes_needed(&self) -> usize {
        let a = self.correction.mode_list().into_iter().max().unwrap_or(0);
        let b = self.mode_table.n_modes.iter().copied().max().unwrap_or(0);
        a.max(b).max(self.gallery.modes)
    }
}

/// Attached to every written artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub constants: Constants,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Provenance {
            config_hash: cfg.hash(),
            constants: cfg.constants,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Everything derived from a config before any source is placed.
pub struct Setup {
    pub config: ExperimentConfig,
    pub medium: DrudeMedium,
    pub mesh: BoundaryMesh,
    pub spectrum: NpSpectrum,
    pub resonances: ResonanceTable,
    pub omega: f64,
    pub radius: f64,
    pub solver: TransmissionSolver,
    pub projector: Backprojector,
    pub reduced: ReducedForm,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.discretization;
        let medium = config.constants.medium();
        let curve = config.curve()?;
        let mesh = discretize(&curve, d.boundary_points)?;
        let n_eig = d.n_eig.max(config.modes_needed());
        let (spectrum, _) = compute_spectrum(&mesh, n_eig)?;
        let resonances = find_resonances(
            &spectrum,
            &medium,
            (d.frequency_range[0], d.frequency_range[1]),
        )?;
        let omega = config.source.omega.resolve(&resonances)?;
        let radius = d.radius_delta * config.constants.delta;
        let solver = TransmissionSolver::new(&mesh, &medium, omega)?;
        let projector =
            Backprojector::new(d.grid, medium.k_m(omega)?, radius, d.sensors, Some(&mesh))?;
        let reduced = ReducedForm::new(&projector);
        Ok(Setup {
            config: config.clone(),
            medium,
            mesh,
            spectrum,
            resonances,
            omega,
            radius,
            solver,
            projector,
            reduced,
        })
    }

    pub fn source_at(&self, position_nm: Point) -> Result<DipoleSource> {
        DipoleSource::new(
            [position_nm[0] * 1e-9, position_nm[1] * 1e-9],
            self.config.source.moment,
            self.omega,
        )
    }

    pub fn source(&self) -> Result<DipoleSource> {
        self.source_at(self.config.source.position_nm)
    }

    /// Noiseless far field of `source` with the particle present.
    pub fn far_field(&self, source: &DipoleSource) -> Result<FarFieldData> {
        let pair = self.solver.solve(source)?;
        measure(
            &self.solver,
            source,
            &pair,
            self.radius,
            self.config.discretization.sensors,
        )
    }

    /// Images of modes `1..=n`.
    pub fn mode_basis(&self, n: usize) -> Result<ModeBasis> {
        mode_images(
            &self.spectrum,
            &self.mesh,
            self.omega,
            &self.projector,
            n,
            None,
        )
    }

    pub fn fit_pair(
        &self,
        data: &FarFieldData,
        basis: &ModeBasis,
    ) -> Result<(LocalizationResult, LocalizationResult)> {
        let s = self.config.fit;
        let plain = LocalizationProblem::new(&self.projector, &self.reduced, data, None, s)?;
        let corr = LocalizationProblem::new(&self.projector, &self.reduced, data, Some(basis), s)?;
        Ok((fit_uncorrected(&plain)?, fit_corrected(&corr)?))
    }
}

/// Writes artifacts into an optional directory.
struct Sink<'a> {
    dir: Option<&'a Path>,
    provenance: &'a Provenance,
}

impl<'a> Sink<'a> {
    fn new(cfg: &'a ExperimentConfig, provenance: &'a Provenance) -> Result<Self> {
        let dir = cfg.out.as_deref();
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Sink { dir, provenance })
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let Some(d) = self.dir else { return Ok(()) };
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        std::fs::write(d.join(name), s)?;
        Ok(())
    }

    fn csv(&self, stem: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let Some(d) = self.dir else { return Ok(()) };
        let mut w = csv::Writer::from_path(d.join(format!("{stem}.csv"))).map_err(csv_err)?;
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
        self.sidecar(stem, header)
    }

    fn sidecar(&self, stem: &str, columns: &[&str]) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'b> {
            provenance: &'b Provenance,
            file: String,
            columns: &'b [&'b str],
        }
        self.json(
            &format!("{stem}.meta.json"),
            &Sidecar {
                provenance: self.provenance,
                file: format!("{stem}.csv"),
                columns,
            },
        )
    }

    fn image(&self, stem: &str, image: &ImageGrid) -> Result<()> {
        let Some(d) = self.dir else { return Ok(()) };
        image.write_csv(std::fs::File::create(d.join(format!("{stem}.csv")))?)?;
        self.sidecar(
            stem,
            &["x_nm", "y_nm", "re_x", "im_x", "re_y", "im_y", "masked"],
        )
    }

    fn data(&self, stem: &str, data: &FarFieldData) -> Result<()> {
        let Some(d) = self.dir else { return Ok(()) };
        data.save(d, stem)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn num(x: f64) -> String {
    format!("{x}")
}

// ---------------------------------------------------------------------------
// mode gallery

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModesReport {
    pub provenance: Provenance,
    pub shape: String,
    pub omega: f64,
    pub eigenvalues: Vec<EigenRecord>,
    pub resonances: ResonanceTable,
    /// Modes written as exterior field grids.
    pub gallery: Vec<usize>,
}

/// Spectrum, resonance table and exterior fields `e_n` of the first gallery modes.
pub fn run_modes(cfg: &ExperimentConfig) -> Result<ModesReport> {
    let setup = Setup::new(cfg)?;
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let k_m = setup.medium.k_m(setup.omega)?;
    let gallery: Vec<usize> = (1..=cfg.gallery.modes).collect();
    let pts = cfg.gallery.grid.points();
    let outside: Vec<bool> = pts
        .iter()
        .map(|&x| check_guard(&setup.mesh, x).is_ok())
        .collect();
    let ext: Vec<Point> = pts
        .iter()
        .zip(&outside)
        .filter(|(_, o)| **o)
        .map(|(p, _)| *p)
        .collect();
    let e = crate::potentials::single_layer_eval_matrix(&setup.mesh, k_m, &ext)?;
    let m = setup.mesh.len();
    let mut dens = DMatrix::<Complex64>::zeros(m, gallery.len());
    for (c, &n) in gallery.iter().enumerate() {
        for (r, v) in setup.spectrum.density(n)?.iter().enumerate() {
            dens[(r, c)] = Complex64::new(*v, 0.0);
        }
    }
    let fields = e * dens;
    for (c, &n) in gallery.iter().enumerate() {
        let mut rows = Vec::with_capacity(pts.len());
        let mut k = 0;
        for (p, &o) in pts.iter().zip(&outside) {
            let (v, masked) = if o {
                k += 1;
                (fields[(k - 1, c)], 0)
            } else {
                (Complex64::new(0.0, 0.0), 1)
            };
            rows.push(vec![
                num(p[0] * 1e9),
                num(p[1] * 1e9),
                num(v.re),
                num(v.im),
                masked.to_string(),
            ]);
        }
        sink.csv(
            &format!("mode_{n}"),
            &["x_nm", "y_nm", "re", "im", "masked"],
            &rows,
        )?;
    }
    let report = ModesReport {
        provenance: prov.clone(),
        shape: cfg.shape.name().to_string(),
        omega: setup.omega,
        eigenvalues: setup.spectrum.records(),
        resonances: setup.resonances.clone(),
        gallery,
    };
    sink.json("resonances.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// mirage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub z_nm: Point,
    pub p: Point,
}

impl Truth {
    fn of(s: &DipoleSource) -> Self {
        Truth {
            z_nm: [s.position[0] * 1e9, s.position[1] * 1e9],
            p: s.moment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirageReport {
    pub provenance: Provenance,
    pub shape: String,
    pub omega: f64,
    pub truth: Truth,
    pub modes: Vec<usize>,
    pub uncorrected: LocalizationRecord,
    pub corrected: LocalizationRecord,
    pub error_uncorrected: ErrorMetrics,
    pub error_corrected: ErrorMetrics,
}

/// Forward solve, back-propagation and both fits for the configured source.
pub fn run_mirage(cfg: &ExperimentConfig) -> Result<MirageReport> {
    let setup = Setup::new(cfg)?;
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let src = setup.source()?;
    let data = setup.far_field(&src)?;
    let modes = cfg.correction.mode_list();
    let basis = setup
        .mode_basis(modes.iter().copied().max().unwrap_or(0))?
        .subset(&modes)?;
    let (plain, corr) = setup.fit_pair(&data, &basis)?;
    sink.data("data", &data)?;
    sink.image("image", &setup.projector.backpropagate(&data)?)?;
    let report = MirageReport {
        provenance: prov.clone(),
        shape: cfg.shape.name().to_string(),
        omega: setup.omega,
        truth: Truth::of(&src),
        modes,
        error_uncorrected: error_metrics(&plain, &src),
        error_corrected: error_metrics(&corr, &src),
        uncorrected: plain.record(),
        corrected: corr.record(),
    };
    sink.json("mirage.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// distance sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub offset_nm: f64,
    /// Distance from the source to the particle boundary.
    pub distance_nm: f64,
    pub err_uncorr_nm: f64,
    pub err_corr_nm: f64,
    pub angerr_uncorr_deg: f64,
    pub angerr_corr_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub provenance: Provenance,
    pub omega: f64,
    pub modes: Vec<usize>,
    pub rows: Vec<DistanceRow>,
}

/// Distance from `x` to the curve, from a dense sampling refined by golden-section
/// search around the closest sample.
pub fn boundary_distance(curve: &ParametricCurve, x: Point) -> f64 {
    let d = |t: f64| {
        let p = curve.eval(t).position;
        (p[0] - x[0]).hypot(p[1] - x[1])
    };
    let n = 2048;
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let (i0, _) = (0..n)
        .map(|i| (i, d(i as f64 * h)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let (mut a, mut b) = ((i0 as f64 - 1.0) * h, (i0 as f64 + 1.0) * h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let e = a + g * (b - a);
        if d(c) < d(e) {
            b = e;
        } else {
            a = c;
        }
    }
    d(0.5 * (a + b))
}

/// Moves the source radially outward by each offset and fits at every position.
pub fn run_distance_sweep(cfg: &ExperimentConfig) -> Result<DistanceReport> {
    let setup = Setup::new(cfg)?;
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let modes = cfg.correction.mode_list();
    let basis = setup
        .mode_basis(modes.iter().copied().max().unwrap_or(0))?
        .subset(&modes)?;
    let z0 = cfg.source.position_nm;
    let r0 = z0[0].hypot(z0[1]);
    if !(r0 > 0.0) {
        return Err(Error::Config(
            "distance sweep needs a source away from the origin".into(),
        ));
    }
    let dir = [z0[0] / r0, z0[1] / r0];
    let rows = cfg
        .distance_sweep
        .offsets_nm
        .par_iter()
        .map(|&t| -> Result<DistanceRow> {
            let src = setup.source_at([z0[0] + t * dir[0], z0[1] + t * dir[1]])?;
            let data = setup.far_field(&src)?;
            let (plain, corr) = setup.fit_pair(&data, &basis)?;
            let (eu, ec) = (error_metrics(&plain, &src), error_metrics(&corr, &src));
            Ok(DistanceRow {
                offset_nm: t,
                distance_nm: boundary_distance(&setup.mesh.curve, src.position) * 1e9,
                err_uncorr_nm: eu.position_nm,
                err_corr_nm: ec.position_nm,
                angerr_uncorr_deg: eu.orientation_deg,
                angerr_corr_deg: ec.orientation_deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.distance_nm),
                num(r.err_uncorr_nm),
                num(r.err_corr_nm),
                num(r.angerr_uncorr_deg),
                num(r.angerr_corr_deg),
            ]
        })
        .collect();
    sink.csv(
        "distance_sweep",
        &[
            "distance_nm",
            "err_uncorr_nm",
            "err_corr_nm",
            "angerr_uncorr_deg",
            "angerr_corr_deg",
        ],
        &table,
    )?;
    let report = DistanceReport {
        provenance: prov.clone(),
        omega: setup.omega,
        modes,
        rows,
    };
    sink.json("distance_sweep.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// noise sweep

/// Boxplot summary: quartiles by linear interpolation, whiskers at the most extreme
/// points within 1.5 IQR, notches at `median ± 1.57 IQR / √n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub notch_lo: f64,
    pub notch_hi: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput(
                "box statistics need finite samples".into(),
            ));
        }
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = s.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
        let notch = 1.57 * iqr / (s.len() as f64).sqrt();
        Ok(BoxStats {
            n: s.len(),
            median,
            q1,
            q3,
            whisker_lo: inside.first().copied().unwrap_or(median),
            whisker_hi: inside.last().copied().unwrap_or(median),
            notch_lo: median - notch,
            notch_hi: median + notch,
            outliers: s.into_iter().filter(|v| *v < lo || *v > hi).collect(),
        })
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(
            "spearman needs two equal-length samples of size >= 2".into(),
        ));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = 0.5 * (i + j) as f64 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSample {
    pub sigma0: f64,
    pub realization: usize,
    pub seed: u64,
    pub err_uncorr_nm: f64,
    pub err_corr_nm: f64,
    pub angerr_uncorr_deg: f64,
    pub angerr_corr_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub sigma0: f64,
    pub err_uncorr_nm: BoxStats,
    pub err_corr_nm: BoxStats,
    pub angerr_uncorr_deg: BoxStats,
    pub angerr_corr_deg: BoxStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub provenance: Provenance,
    pub omega: f64,
    pub modes: Vec<usize>,
    pub levels: Vec<NoiseLevel>,
    pub samples: Vec<NoiseSample>,
}

/// Per-realization seeds drawn from one ChaCha stream keyed by the config seed.
pub fn realization_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Localizes noisy copies of the configured far field at each noise level.
pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<NoiseReport> {
    let ns = &cfg.noise_sweep;
    if ns.realizations == 0 || ns.sigma0.is_empty() {
        return Err(Error::Config(
            "noise sweep needs noise levels and at least one realization".into(),
        ));
    }
    let setup = Setup::new(cfg)?;
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let src = setup.source()?;
    let clean = setup.far_field(&src)?;
    let modes = cfg.correction.mode_list();
    let basis = setup
        .mode_basis(modes.iter().copied().max().unwrap_or(0))?
        .subset(&modes)?;
    let seeds = realization_seeds(cfg.seed, ns.sigma0.len() * ns.realizations);
    let jobs: Vec<(usize, usize)> = (0..ns.sigma0.len())
        .flat_map(|l| (0..ns.realizations).map(move |r| (l, r)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(l, r)| -> Result<NoiseSample> {
            let seed = seeds[l * ns.realizations + r];
            let data = add_noise(&clean, ns.sigma0[l], seed)?;
            let (plain, corr) = setup.fit_pair(&data, &basis)?;
            let (eu, ec) = (error_metrics(&plain, &src), error_metrics(&corr, &src));
            Ok(NoiseSample {
                sigma0: ns.sigma0[l],
                realization: r,
                seed,
                err_uncorr_nm: eu.position_nm,
                err_corr_nm: ec.position_nm,
                angerr_uncorr_deg: eu.orientation_deg,
                angerr_corr_deg: ec.orientation_deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut levels = Vec::new();
    for (l, &s0) in ns.sigma0.iter().enumerate() {
        let block = &samples[l * ns.realizations..(l + 1) * ns.realizations];
        let col = |f: fn(&NoiseSample) -> f64| block.iter().map(f).collect::<Vec<_>>();
        levels.push(NoiseLevel {
            sigma0: s0,
            err_uncorr_nm: BoxStats::of(&col(|s| s.err_uncorr_nm))?,
            err_corr_nm: BoxStats::of(&col(|s| s.err_corr_nm))?,
            angerr_uncorr_deg: BoxStats::of(&col(|s| s.angerr_uncorr_deg))?,
            angerr_corr_deg: BoxStats::of(&col(|s| s.angerr_corr_deg))?,
        });
    }
    let raw: Vec<Vec<String>> = samples
        .iter()
        .map(|s| {
            vec![
                num(s.sigma0),
                s.realization.to_string(),
                s.seed.to_string(),
                num(s.err_uncorr_nm),
                num(s.err_corr_nm),
                num(s.angerr_uncorr_deg),
                num(s.angerr_corr_deg),
            ]
        })
        .collect();
    sink.csv(
        "noise_samples",
        &[
            "sigma0",
            "realization",
            "seed",
            "err_uncorr_nm",
            "err_corr_nm",
            "angerr_uncorr_deg",
            "angerr_corr_deg",
        ],
        &raw,
    )?;
    let mut summary = Vec::new();
    for lv in &levels {
        for (name, b) in [
            ("err_uncorr_nm", &lv.err_uncorr_nm),
            ("err_corr_nm", &lv.err_corr_nm),
            ("angerr_uncorr_deg", &lv.angerr_uncorr_deg),
            ("angerr_corr_deg", &lv.angerr_corr_deg),
        ] {
            summary.push(vec![
                num(lv.sigma0),
                name.to_string(),
                num(b.median),
                num(b.q1),
                num(b.q3),
                num(b.whisker_lo),
                num(b.whisker_hi),
                num(b.notch_lo),
                num(b.notch_hi),
                b.outliers.len().to_string(),
            ]);
        }
    }
    sink.csv(
        "noise_summary",
        &[
            "sigma0",
            "metric",
            "median",
            "q1",
            "q3",
            "whisker_lo",
            "whisker_hi",
            "notch_lo",
            "notch_hi",
            "n_outliers",
        ],
        &summary,
    )?;
    let report = NoiseReport {
        provenance: prov.clone(),
        omega: setup.omega,
        modes,
        levels,
        samples,
    };
    sink.json("noise_sweep.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// mode-count table

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeTableRow {
    pub n_modes: usize,
    pub angle_error_deg: f64,
    pub position_error_nm: f64,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTableReport {
    pub provenance: Provenance,
    pub omega: f64,
    pub rows: Vec<ModeTableRow>,
}

/// Corrected fit with modes `1..=N` for each configured `N`.
pub fn run_mode_table(cfg: &ExperimentConfig) -> Result<ModeTableReport> {
    let setup = Setup::new(cfg)?;
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let src = setup.source()?;
    let data = setup.far_field(&src)?;
    let nmax = cfg.mode_table.n_modes.iter().copied().max().unwrap_or(0);
    let full = setup.mode_basis(nmax)?;
    let rows = cfg
        .mode_table
        .n_modes
        .par_iter()
        .map(|&n| -> Result<ModeTableRow> {
            let basis = full.subset(&(1..=n).collect::<Vec<_>>())?;
            let prob = LocalizationProblem::new(
                &setup.projector,
                &setup.reduced,
                &data,
                Some(&basis),
                cfg.fit,
            )?;
            let res = fit_corrected(&prob)?;
            let e = error_metrics(&res, &src);
            Ok(ModeTableRow {
                n_modes: n,
                angle_error_deg: e.orientation_deg,
                position_error_nm: e.position_nm,
                relative_residual: res.relative_residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_modes.to_string(),
                num(r.angle_error_deg),
                num(r.position_error_nm),
            ]
        })
        .collect();
    sink.csv(
        "mode_table",
        &["n_modes", "angle_error_deg", "position_error_nm"],
        &table,
    )?;
    let report = ModeTableReport {
        provenance: prov.clone(),
        omega: setup.omega,
        rows,
    };
    sink.json("mode_table.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// primitives

/// Noiseless far field of the configured source.
pub fn run_forward(cfg: &ExperimentConfig) -> Result<FarFieldData> {
    let setup = Setup::new(cfg)?;
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let data = setup.far_field(&setup.source()?)?;
    sink.data("data", &data)?;
    Ok(data)
}

/// Back-propagation of `data` onto the configured grid.
pub fn run_image(cfg: &ExperimentConfig, data: &FarFieldData) -> Result<ImageGrid> {
    cfg.validate()?;
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let curve = cfg.curve()?;
    let mesh = discretize(&curve, cfg.discretization.boundary_points)?;
    let image = crate::imaging::backpropagate(data, cfg.discretization.grid, Some(&mesh))?;
    sink.image("image", &image)?;
    Ok(image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeReport {
    pub provenance: Provenance,
    pub omega: f64,
    pub modes: Vec<usize>,
    pub uncorrected: LocalizationRecord,
    pub corrected: LocalizationRecord,
    /// Present when the data records the true source.
    pub error_uncorrected: Option<ErrorMetrics>,
    pub error_corrected: Option<ErrorMetrics>,
}

/// Both fits on externally supplied data; the configured frequency must match.
pub fn run_localize(cfg: &ExperimentConfig, data: &FarFieldData) -> Result<LocalizeReport> {
    let setup = Setup::new(cfg)?;
    if (data.meta.omega - setup.omega).abs() > 1e-9 * setup.omega {
        return Err(Error::Config(format!(
            "data frequency {} differs from configured {}",
            data.meta.omega, setup.omega
        )));
    }
    if data.meta.n_sensors != cfg.discretization.sensors
        || (data.meta.radius - setup.radius).abs() > 1e-12 * setup.radius
    {
        return Err(Error::Config(
            "data sensor ring differs from the configuration".into(),
        ));
    }
    let prov = Provenance::of(cfg);
    let sink = Sink::new(cfg, &prov)?;
    let modes = cfg.correction.mode_list();
    let basis = setup
        .mode_basis(modes.iter().copied().max().unwrap_or(0))?
        .subset(&modes)?;
    let (plain, corr) = setup.fit_pair(data, &basis)?;
    let truth = match (data.meta.z_true, data.meta.p_true) {
        (Some(z), Some(p)) => Some(DipoleSource::new(z, p, setup.omega)?),
        _ => None,
    };
    let report = LocalizeReport {
        provenance: prov.clone(),
        omega: setup.omega,
        modes,
        error_uncorrected: truth.as_ref().map(|t| error_metrics(&plain, t)),
        error_corrected: truth.as_ref().map(|t| error_metrics(&corr, t)),
        uncorrected: plain.record(),
        corrected: corr.record(),
    };
    sink.json("localize.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// wire format shared by the service and its clients

/// Body of every experiment request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
}

/// Body of the `image` and `localize` requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRequest {
    #[serde(default)]
    pub config: ExperimentConfig,
    pub data: FarFieldData,
}

/// Error payload returned by the service and printed by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        ErrorBody {
            error: ErrorDetail {
                kind: kind.into(),
                message: message.into(),
            },
        }
    }
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        ErrorBody::new(e.kind(), e.to_string())
    }
}
