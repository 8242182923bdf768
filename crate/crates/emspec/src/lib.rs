//! Spectral models, fitting machinery, and synthetic-data generators for
//! phonon-coupled quantum emitters in tunable optical microcavities.
//!
//! The crate is organized around five areas:
//!
//! - [`model`] — lineshape evaluation (zero-phonon lines, acoustic phonon
//!   sidebands, cavity mode, coupled model) and component integrals.
//! - [`fit`] — bounded, weighted Levenberg–Marquardt least squares with
//!   parameter tying, plus inverse-variance averaging.
//! - [`scan`] — the staged pipeline that turns a cavity-detuning scan into
//!   consolidated emitter parameters, per-detuning component intensities,
//!   and coupling factors.
//! - [`timedomain`] — second-order correlation and lifetime analysis with
//!   skew-Gaussian instrument-response deconvolution.
//! - [`synth`] — seeded Poisson generators whose expectation functions are
//!   exactly the model evaluators, used as ground-truth oracles.

pub mod constants;
pub mod fit;
pub mod model;
pub mod quad;
pub mod scan;
pub mod spectrum;
pub mod synth;
pub mod timedomain;

pub use fit::{least_squares, weighted_average, FitOptions, FitResult, ParamSpec, WeightedSample};
pub use model::{
    cavity_filter, eval_additive, eval_coupled, eval_lorentzian, eval_psb, integrate_component,
    CoupledModelParams, EmitterLine, LorentzianParams, PsbParams, SpectralComponent,
};
pub use scan::{
    fit_scan, CavityDispersion, DetuningScan, ScanConfig, ScanFitReport, SharedParams,
    SpectrumRecord,
};
pub use spectrum::{EnergyGrid, Spectrum};
pub use timedomain::{
    convolve_with_irf, fit_g2, fit_irf, fit_lifetime, g2_ideal, normalize_g2,
    skew_gaussian_density, CorrelationHistogram, G2FitResult, IrfModel, LifetimeFitResult,
    NormalizedG2, TimeGrid,
};
