use thiserror::Error;

/// Failures reported by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("point {0:?} is a kernel singularity")]
    Singular([f64; 2]),
    #[error("evaluation point lies within {distance:.3e} m of the boundary (guard {guard:.3e} m)")]
    NearBoundary { distance: f64, guard: f64 },
    #[error("ill-conditioned system: condition estimate {0:.3e}")]
    IllConditioned(f64),
    #[error("spectrum: {0}")]
    Spectrum(String),
    #[error("resonant divergence: |tau_{index}| = {magnitude:.3e}")]
    ResonantDivergence { index: usize, magnitude: f64 },
    #[error("mesh mismatch: {0} vs {1} nodes")]
    MeshMismatch(usize, usize),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Singular(_) => "singular",
            Error::NearBoundary { .. } => "near_boundary",
            Error::IllConditioned(_) => "ill_conditioned",
            Error::Spectrum(_) => "spectrum",
            Error::ResonantDivergence { .. } => "resonant_divergence",
            Error::MeshMismatch(..) => "mesh_mismatch",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the failure is attributable to the request rather than the computation.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Config(_)
                | Error::MeshMismatch(..)
                | Error::NearBoundary { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
