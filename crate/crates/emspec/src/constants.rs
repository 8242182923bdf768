//! Physical constants used throughout the crate.

/// Boltzmann constant in eV/K (CODATA).
pub const BOLTZMANN_EV_PER_K: f64 = 8.617_333_262e-5;
