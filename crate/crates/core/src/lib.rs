//! Boundary-integral forward model, Neumann–Poincaré spectrum and mode-corrected
//! dipole localization for plasmonic nanoparticles in two dimensions.

pub mod bessel;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod harness;
pub mod imaging;
pub mod kernels;
pub mod localize;
pub mod potentials;
pub mod spectrum;

use num_complex::Complex64;

pub use error::{Error, Result};

/// A point or real vector in the plane.
pub type Point = [f64; 2];

/// A complex vector in the plane.
pub type CVec2 = [Complex64; 2];
