//! Staged analysis of a cavity-detuning scan.
//!
//! 1. **Dispersion** — detect the cavity peak in each spectrum away from the
//!    emitter, fit a low-order polynomial to its energy versus scan index,
//!    and preset the cavity center for every fit.
//! 2. **Stage A** — per-spectrum additive fits on the significantly
//!    red-detuned subset, with the doublet amplitudes and widths tied.
//! 3. **Consolidation** — inverse-variance averages of the shared
//!    quantities over the fits whose cavity energy falls in the
//!    consolidation window.
//! 4. **Stage C** — per-spectrum coupled fits with the shared quantities
//!    fixed and per-line coupling factors free, followed by component
//!    integration.

use crate::fit::{self, FitOptions, FitResult, ParamSpec, WeightedSample};
use crate::model::{
    eval_additive, eval_coupled, eval_psb, integrate_component, CoupledModelParams, EmitterLine,
    LorentzianParams, PsbParams, SpectralComponent,
};
use crate::spectrum::Spectrum;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MASK_MAX_EV: f64 = 1.951;
pub const DEFAULT_WINDOW_EV: (f64, f64) = (1.9413, 1.9426);
/// Default red-detuning threshold: twice a typical cavity FWHM.
pub const DEFAULT_RED_DETUNED_THRESHOLD_EV: f64 = 4.6e-3;

#[derive(Debug, Error, PartialEq)]
pub enum ScanError {
    #[error("a detuning scan needs at least 3 spectra (got {0})")]
    TooFewSpectra(usize),
    #[error("all spectra must share one energy grid (spectrum {0} differs)")]
    GridMismatch(usize),
    #[error("scan_coord length {coords} does not match {spectra} spectra")]
    CoordLengthMismatch { coords: usize, spectra: usize },
    #[error("temperature must be positive (got {0})")]
    BadTemperature(f64),
    #[error("consolidation window must satisfy lo < hi (got [{0}, {1}])")]
    BadWindow(f64, f64),
}

/// Ordered set of spectra acquired while tuning the cavity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetuningScan {
    pub spectra: Vec<Spectrum>,
    pub scan_coord: Vec<f64>,
    pub temperature_k: f64,
    /// Energies above this are excluded from all fits.
    pub fit_mask_max_energy_ev: f64,
    /// Cavity-energy interval over which shared parameters are consolidated.
    pub consolidation_window_ev: (f64, f64),
}

impl DetuningScan {
    pub fn new(
        spectra: Vec<Spectrum>,
        scan_coord: Vec<f64>,
        temperature_k: f64,
        fit_mask_max_energy_ev: f64,
        consolidation_window_ev: (f64, f64),
    ) -> Result<Self, ScanError> {
        if spectra.len() < 3 {
            return Err(ScanError::TooFewSpectra(spectra.len()));
        }
        if scan_coord.len() != spectra.len() {
            return Err(ScanError::CoordLengthMismatch {
                coords: scan_coord.len(),
                spectra: spectra.len(),
            });
        }
        let grid = spectra[0].energies_ev();
        for (i, s) in spectra.iter().enumerate().skip(1) {
            if s.energies_ev() != grid {
                return Err(ScanError::GridMismatch(i));
            }
        }
        if !(temperature_k > 0.0) {
            return Err(ScanError::BadTemperature(temperature_k));
        }
        if !(consolidation_window_ev.0 < consolidation_window_ev.1) {
            return Err(ScanError::BadWindow(
                consolidation_window_ev.0,
                consolidation_window_ev.1,
            ));
        }
        Ok(Self {
            spectra,
            scan_coord,
            temperature_k,
            fit_mask_max_energy_ev,
            consolidation_window_ev,
        })
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }
}

/// Pipeline configuration; defaults follow the analysis conventions
/// (see field docs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Degree of the dispersion polynomial (1..=3).
    pub dispersion_degree: usize,
    /// Half-width of the emitter exclusion band for cavity peak detection.
    pub emitter_exclusion_ev: f64,
    /// Fraction of spectra in which the cavity must be detectable.
    pub detection_min_fraction: f64,
    /// Peak significance in units of sqrt(background).
    pub detection_snr: f64,
    /// A spectrum joins stage A when `E_c - E_x < -threshold`.
    pub red_detuned_threshold_ev: f64,
    pub zpl_fwhm_seed_ev: f64,
    pub psb_gamma_seed_ev: f64,
    pub cavity_fwhm_seed_ev: f64,
    pub spacing_seed_ev: f64,
    pub alpha_bounds: (f64, f64),
    #[serde(skip, default)]
    pub fit: FitOptions,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            dispersion_degree: 2,
            emitter_exclusion_ev: 3.0e-3,
            detection_min_fraction: 0.6,
            detection_snr: 5.0,
            red_detuned_threshold_ev: DEFAULT_RED_DETUNED_THRESHOLD_EV,
            zpl_fwhm_seed_ev: 0.3e-3,
            psb_gamma_seed_ev: 1.0e-3,
            cavity_fwhm_seed_ev: 2.0e-3,
            spacing_seed_ev: 0.5e-3,
            alpha_bounds: (-1.0, 1.0e4),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Dispersion,
    StageA,
    Consolidation,
    StageC,
    Integration,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Dispersion => "dispersion",
            Stage::StageA => "stage-A",
            Stage::Consolidation => "consolidation",
            Stage::StageC => "stage-C",
            Stage::Integration => "integration",
        };
        f.write_str(name)
    }
}

/// Results accumulated before a pipeline stage failed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PartialReport {
    pub dispersion: Option<CavityDispersion>,
    pub stage_a: Vec<(usize, FitResult)>,
    pub shared: Option<SharedParams>,
}

#[derive(Debug, Error)]
#[error("{stage} stage: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    pub partial: Box<PartialReport>,
}

impl PipelineError {
    fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
            partial: Box::default(),
        }
    }

    fn with_partial(mut self, partial: PartialReport) -> Self {
        self.partial = Box::new(partial);
        self
    }
}

/// Smooth-curve preset of the cavity energy along the scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CavityDispersion {
    pub degree: usize,
    /// Polynomial coefficients (ascending powers) in the centered scan
    /// index `t = i - (n-1)/2`.
    pub coefficients: Vec<f64>,
    pub residual_rms_ev: f64,
    /// Preset cavity energy for every spectrum.
    pub preset_ec_ev: Vec<f64>,
    /// Detected peak energies (None where no significant peak was found).
    pub detected_ec_ev: Vec<Option<f64>>,
}

impl CavityDispersion {
    /// Dispersion from externally known cavity energies (no detection).
    pub fn from_presets(preset_ec_ev: Vec<f64>) -> Self {
        let n = preset_ec_ev.len();
        Self {
            degree: 0,
            coefficients: Vec::new(),
            residual_rms_ev: 0.0,
            preset_ec_ev,
            detected_ec_ev: vec![None; n],
        }
    }
}

/// Consolidated shared quantities, each as an inverse-variance average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharedParams {
    pub spacing_ev: WeightedSample,
    pub zpl_peak: WeightedSample,
    pub psb_amplitude: WeightedSample,
    pub psb_gamma_ev: WeightedSample,
    pub cavity_fwhm_ev: WeightedSample,
    pub background: WeightedSample,
    /// Stage-A average ZPL width; reported, not fixed in stage C.
    pub zpl_fwhm_stage_a_ev: WeightedSample,
    /// Stage-A average doublet center, used to seed stage C.
    pub mean_center_ev: WeightedSample,
}

/// Per-spectrum outcome of the full pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub index: usize,
    pub scan_coord: f64,
    pub e_c_ev: f64,
    /// `E_c - (E_x1 + E_x2)/2` with the stage-C center.
    pub detuning_ev: f64,
    pub mean_center_ev: WeightedSample,
    pub zpl_fwhm_ev: WeightedSample,
    pub cavity_peak: WeightedSample,
    pub alpha: [WeightedSample; 2],
    /// Integrated intensities in counts * eV.
    pub intensity_cavity: f64,
    pub intensity_lines: [f64; 2],
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub n_iter: usize,
}

/// Full pipeline output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanFitReport {
    pub dispersion: CavityDispersion,
    pub stage_a_indices: Vec<usize>,
    pub shared: SharedParams,
    pub records: Vec<SpectrumRecord>,
    /// Weighted average of the stage-C ZPL widths across the scan.
    pub zpl_fwhm_weighted_ev: WeightedSample,
    pub all_converged: bool,
}

/// Median of the per-spectrum masked argmax energies: the emitter is
/// spectrally stable while the cavity moves, so the argmax clusters at the
/// emitter.
fn emitter_reference(scan: &DetuningScan) -> f64 {
    let mask_max = scan.fit_mask_max_energy_ev;
    let mut peaks: Vec<f64> = scan
        .spectra
        .iter()
        .filter_map(|s| s.argmax_where(|e| e <= mask_max))
        .map(|i| scan.spectra[0].energies_ev()[i])
        .collect();
    peaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    peaks[peaks.len() / 2]
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Height of peak `i` above the highest saddle connecting it to higher
/// ground; infinite when nothing on the grid exceeds it.
fn prominence(counts: &[f64], i: usize) -> f64 {
    let mut highest_saddle = f64::NEG_INFINITY;
    for dir in [-1_isize, 1] {
        let mut j = i as isize;
        let mut saddle = counts[i];
        loop {
            j += dir;
            if j < 0 || j as usize >= counts.len() {
                break; // no higher ground this way
            }
            let c = counts[j as usize];
            saddle = saddle.min(c);
            if c > counts[i] {
                highest_saddle = highest_saddle.max(saddle);
                break;
            }
        }
    }
    if highest_saddle == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        counts[i] - highest_saddle
    }
}

/// Detect the cavity peak outside the emitter exclusion band; refines the
/// grid maximum with a three-point parabola.
///
/// A candidate must be a genuine local maximum with a prominence well above
/// the Poisson noise scale; a noise bump riding the flank of a feature cut
/// off by the exclusion band fails that test, so spectra whose cavity
/// overlaps the emitter yield no detection.
fn detect_cavity_peak(spectrum: &Spectrum, emitter_ev: f64, config: &ScanConfig) -> Option<f64> {
    let energies = spectrum.energies_ev();
    let counts = spectrum.counts();
    let n = energies.len();
    let allowed =
        |i: usize| (energies[i] - emitter_ev).abs() > config.emitter_exclusion_ev;
    let n_allowed = (0..n).filter(|&i| allowed(i)).count();
    if n_allowed < 8 {
        return None;
    }
    let mut region: Vec<f64> = (0..n).filter(|&i| allowed(i)).map(|i| counts[i]).collect();
    let background = median(&mut region);

    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| allowed(i) && counts[i] > counts[i - 1] && counts[i] >= counts[i + 1])
        .collect();
    candidates.sort_by(|&a, &b| counts[b].partial_cmp(&counts[a]).unwrap());

    let peak_idx = candidates.into_iter().find(|&i| {
        counts[i] - background > config.detection_snr * (background + 1.0).sqrt()
            && prominence(counts, i) > config.detection_snr * counts[i].max(1.0).sqrt()
    })?;

    // Parabolic refinement on the raw neighbors.
    let (c0, c1, c2) = (counts[peak_idx - 1], counts[peak_idx], counts[peak_idx + 1]);
    let denom = c0 - 2.0 * c1 + c2;
    if denom >= 0.0 {
        return Some(energies[peak_idx]);
    }
    let h = 0.5 * (energies[peak_idx + 1] - energies[peak_idx - 1]);
    let offset = (0.5 * (c0 - c2) / denom * h).clamp(-h, h);
    Some(energies[peak_idx] + offset)
}

/// Weighted-free polynomial least squares in the centered index.
fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Vec<f64> {
    let n = xs.len();
    let m = degree + 1;
    let mut design = DMatrix::zeros(n, m);
    for (r, &x) in xs.iter().enumerate() {
        let mut pw = 1.0;
        for c in 0..m {
            design[(r, c)] = pw;
            pw *= x;
        }
    }
    let rhs = DVector::from_column_slice(ys);
    let svd = design.svd(true, true);
    svd.solve(&rhs, 1e-14)
        .expect("svd solve")
        .iter()
        .cloned()
        .collect()
}

fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Preset the cavity energy of every spectrum from a smooth polynomial fit
/// to the detected cavity peak positions.
pub fn extract_cavity_dispersion(
    scan: &DetuningScan,
    config: &ScanConfig,
) -> Result<CavityDispersion, PipelineError> {
    assert!(
        (1..=3).contains(&config.dispersion_degree),
        "dispersion degree must be 1..=3"
    );
    let emitter = emitter_reference(scan);
    let n = scan.len();
    let detected: Vec<Option<f64>> = scan
        .spectra
        .iter()
        .map(|s| detect_cavity_peak(s, emitter, config))
        .collect();

    let found: Vec<(usize, f64)> = detected
        .iter()
        .enumerate()
        .filter_map(|(i, &e)| e.map(|e| (i, e)))
        .collect();
    let needed = (config.detection_min_fraction * n as f64).ceil() as usize;
    if found.len() < needed.max(config.dispersion_degree + 1) {
        let missing: Vec<String> = detected
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_none())
            .map(|(i, _)| i.to_string())
            .collect();
        return Err(PipelineError::new(
            Stage::Dispersion,
            format!(
                "cavity peak detected in only {}/{} spectra (need {}); undetected: [{}]",
                found.len(),
                n,
                needed,
                missing.join(", ")
            ),
        ));
    }

    let center = (n - 1) as f64 / 2.0;
    let xs: Vec<f64> = found.iter().map(|&(i, _)| i as f64 - center).collect();
    let ys: Vec<f64> = found.iter().map(|&(_, e)| e).collect();
    let coefficients = polyfit(&xs, &ys, config.dispersion_degree);

    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| (y - polyval(&coefficients, x)).powi(2))
        .sum();
    let residual_rms_ev = (rss / xs.len() as f64).sqrt();
    let preset_ec_ev: Vec<f64> = (0..n)
        .map(|i| polyval(&coefficients, i as f64 - center))
        .collect();

    Ok(CavityDispersion {
        degree: config.dispersion_degree,
        coefficients,
        residual_rms_ev,
        preset_ec_ev,
        detected_ec_ev: detected,
    })
}

// Stage-A parameter order; the cavity center rides along as a fixed entry.
const STAGE_A_NAMES: [&str; 10] = [
    "ex1",
    "spacing",
    "zpl_peak",
    "zpl_fwhm",
    "psb_amplitude",
    "psb_gamma",
    "cavity_peak",
    "cavity_fwhm",
    "background",
    "cavity_center",
];

fn additive_params(p: &[f64], temperature_k: f64) -> CoupledModelParams {
    let [ex1, spacing, zpl_peak, zpl_fwhm, psb_a, psb_gamma, cavity_peak, cavity_fwhm, background, cavity_center] =
        *p
    else {
        panic!("stage-A parameter vector has 10 entries");
    };
    let line = |center: f64| EmitterLine {
        zpl: LorentzianParams::new(center, zpl_fwhm, zpl_peak),
        psb: PsbParams {
            center_ev: center,
            amplitude: psb_a,
            gauss_width_ev: psb_gamma,
            temperature_k,
        },
    };
    CoupledModelParams {
        lines: [line(ex1), line(ex1 + spacing)],
        cavity: LorentzianParams::new(cavity_center, cavity_fwhm, cavity_peak),
        alpha: [0.0, 0.0],
        background,
    }
}

/// Local maxima (strictly above the left neighbor, at least the right one)
/// among masked points.
fn local_maxima(spectrum: &Spectrum, accept: impl Fn(f64) -> bool) -> Vec<usize> {
    let e = spectrum.energies_ev();
    let c = spectrum.counts();
    (1..e.len() - 1)
        .filter(|&i| accept(e[i]) && c[i] > c[i - 1] && c[i] >= c[i + 1])
        .collect()
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx]
}

fn nearest_index(energies: &[f64], target: f64) -> usize {
    match energies.binary_search_by(|e| e.partial_cmp(&target).unwrap()) {
        Ok(i) => i,
        Err(i) => {
            if i == 0 {
                0
            } else if i >= energies.len() {
                energies.len() - 1
            } else if (energies[i] - target).abs() < (target - energies[i - 1]).abs() {
                i
            } else {
                i - 1
            }
        }
    }
}

/// Build the default stage-A parameter seeds for one spectrum.
pub fn stage_a_seeds(
    scan: &DetuningScan,
    index: usize,
    e_c_ev: f64,
    config: &ScanConfig,
) -> Result<Vec<ParamSpec>, PipelineError> {
    let spectrum = &scan.spectra[index];
    let mask_max = scan.fit_mask_max_energy_ev;
    let energies = spectrum.energies_ev();
    let counts = spectrum.counts();
    let cavity_zone = 1.5 * config.cavity_fwhm_seed_ev;
    let emitter_ok = |e: f64| e <= mask_max && (e - e_c_ev).abs() > cavity_zone;

    let top = spectrum.argmax_where(emitter_ok).ok_or_else(|| {
        PipelineError::new(
            Stage::StageA,
            format!("spectrum {index}: no emitter candidate outside the cavity zone"),
        )
    })?;
    let e_top = energies[top];

    let detuning = e_c_ev - e_top;
    if detuning >= -config.red_detuned_threshold_ev {
        return Err(PipelineError::new(
            Stage::StageA,
            format!(
                "spectrum {index}: cavity not significantly red-detuned \
                 (E_c - E_x = {:.4} meV, need < -{:.4} meV)",
                detuning * 1e3,
                config.red_detuned_threshold_ev * 1e3
            ),
        ));
    }

    // Doublet partner: the tallest other local maximum at doublet-like
    // separation from the primary peak.
    let min_sep = 1.5 * config.zpl_fwhm_seed_ev;
    let max_sep = 2.0e-3;
    let partner = local_maxima(spectrum, emitter_ok)
        .into_iter()
        .filter(|&i| {
            let d = (energies[i] - e_top).abs();
            d > min_sep && d < max_sep
        })
        .max_by(|&a, &b| counts[a].partial_cmp(&counts[b]).unwrap());

    let (ex1_seed, spacing_seed) = match partner {
        Some(p) => {
            let e_p = energies[p];
            (e_top.min(e_p), (e_top - e_p).abs())
        }
        None => (e_top, config.spacing_seed_ev),
    };

    let masked: Vec<f64> = energies
        .iter()
        .zip(counts)
        .filter(|(&e, _)| e <= mask_max)
        .map(|(_, &c)| c)
        .collect();
    let background_seed = percentile(&masked, 0.10);
    let zpl_peak_seed = ((counts[top] - background_seed) * 0.7).max(1.0);

    // Probe the Stokes wing to scale the sideband amplitude.
    let probe_offset = 1.5e-3;
    let probe_idx = nearest_index(energies, ex1_seed - probe_offset);
    let probe_level = (counts[probe_idx] - background_seed).max(1.0);
    let unit_psb = PsbParams {
        center_ev: ex1_seed,
        amplitude: 1.0,
        gauss_width_ev: config.psb_gamma_seed_ev,
        temperature_k: scan.temperature_k,
    };
    let unit_value = eval_psb(ex1_seed - probe_offset, &unit_psb).max(1e-12);
    let psb_a_seed = probe_level / unit_value;

    let cav_idx = nearest_index(energies, e_c_ev);
    let cavity_peak_seed = (counts[cav_idx] - background_seed).max(1.0);

    let grid_lo = energies[0];
    Ok(vec![
        ParamSpec::bounded("ex1", ex1_seed, grid_lo, mask_max),
        ParamSpec::bounded("spacing", spacing_seed.clamp(0.06e-3, 1.9e-3), 0.05e-3, 2.0e-3),
        ParamSpec::bounded("zpl_peak", zpl_peak_seed, 0.0, f64::INFINITY),
        ParamSpec::bounded("zpl_fwhm", config.zpl_fwhm_seed_ev, 0.02e-3, 2.0e-3),
        ParamSpec::bounded("psb_amplitude", psb_a_seed, 0.0, f64::INFINITY),
        ParamSpec::bounded("psb_gamma", config.psb_gamma_seed_ev, 0.1e-3, 6.0e-3),
        ParamSpec::bounded("cavity_peak", cavity_peak_seed, 0.0, f64::INFINITY),
        ParamSpec::bounded("cavity_fwhm", config.cavity_fwhm_seed_ev, 0.5e-3, 12.0e-3),
        ParamSpec::bounded("background", background_seed.max(0.0), 0.0, f64::INFINITY),
        ParamSpec::fixed("cavity_center", e_c_ev),
    ])
}

/// Additive-model fit of one red-detuned spectrum with the cavity center
/// preset. Doublet amplitudes and widths are shared between the two lines
/// by construction of the model.
pub fn fit_stage_a(
    scan: &DetuningScan,
    index: usize,
    e_c_ev: f64,
    init: Option<Vec<ParamSpec>>,
    config: &ScanConfig,
) -> Result<FitResult, PipelineError> {
    let specs = match init {
        Some(s) => s,
        None => stage_a_seeds(scan, index, e_c_ev, config)?,
    };
    debug_assert_eq!(specs.len(), STAGE_A_NAMES.len());
    let temperature = scan.temperature_k;
    let mask_max = scan.fit_mask_max_energy_ev;
    let model = move |p: &[f64], x: &[f64], out: &mut [f64]| {
        let params = additive_params(p, temperature);
        for (o, &e) in out.iter_mut().zip(x) {
            *o = eval_additive(e, &params);
        }
    };
    fit::fit_spectrum(
        model,
        &scan.spectra[index],
        |e| e <= mask_max,
        &specs,
        &config.fit,
    )
    .map_err(|e| PipelineError::new(Stage::StageA, format!("spectrum {index}: {e}")))
}

/// Exact-zero uncertainties (noiseless data) get a relative floor so the
/// inverse-variance average stays defined.
fn sigma_floor(ws: WeightedSample) -> WeightedSample {
    let floor = ws.value.abs() * 1e-15 + 1e-300;
    WeightedSample::new(ws.value, ws.sigma.max(floor))
}

/// Inverse-variance consolidation of the shared quantities over the stage-A
/// fits whose preset cavity energy lies inside `window`.
pub fn consolidate_shared(
    stage_a: &[(f64, FitResult)],
    window: (f64, f64),
) -> Result<SharedParams, PipelineError> {
    let selected: Vec<&FitResult> = stage_a
        .iter()
        .filter(|(ec, fit)| *ec >= window.0 && *ec <= window.1 && fit.converged)
        .map(|(_, fit)| fit)
        .collect();
    if selected.len() < 2 {
        let mut available: Vec<f64> = stage_a.iter().map(|(ec, _)| *ec).collect();
        let mid = 0.5 * (window.0 + window.1);
        available.sort_by(|a, b| {
            (a - mid)
                .abs()
                .partial_cmp(&(b - mid).abs())
                .unwrap()
        });
        let nearest: Vec<String> = available
            .iter()
            .take(4)
            .map(|e| format!("{e:.5}"))
            .collect();
        return Err(PipelineError::new(
            Stage::Consolidation,
            format!(
                "window [{:.5}, {:.5}] eV selects {} converged stage-A fits (need >= 2); \
                 nearest cavity energies: [{}]",
                window.0,
                window.1,
                selected.len(),
                nearest.join(", ")
            ),
        ));
    }

    let average = |name: &str| -> Result<WeightedSample, PipelineError> {
        let samples: Vec<WeightedSample> = selected
            .iter()
            .map(|fit| sigma_floor(fit.estimate(name).expect("stage-A parameter")))
            .collect();
        fit::weighted_average(&samples)
            .map_err(|e| PipelineError::new(Stage::Consolidation, e.to_string()))
    };

    // Doublet center with covariance-aware uncertainty.
    let centers: Vec<WeightedSample> = selected
        .iter()
        .map(|fit| {
            let ex1 = fit.estimate("ex1").expect("ex1");
            let sp = fit.estimate("spacing").expect("spacing");
            let cov = fit.covar("ex1", "spacing").unwrap_or(0.0);
            let var = (ex1.sigma * ex1.sigma + 0.25 * sp.sigma * sp.sigma + cov).max(0.0);
            sigma_floor(WeightedSample::new(ex1.value + 0.5 * sp.value, var.sqrt()))
        })
        .collect();
    let mean_center_ev = fit::weighted_average(&centers)
        .map_err(|e| PipelineError::new(Stage::Consolidation, e.to_string()))?;

    Ok(SharedParams {
        spacing_ev: average("spacing")?,
        zpl_peak: average("zpl_peak")?,
        psb_amplitude: average("psb_amplitude")?,
        psb_gamma_ev: average("psb_gamma")?,
        cavity_fwhm_ev: average("cavity_fwhm")?,
        background: average("background")?,
        zpl_fwhm_stage_a_ev: average("zpl_fwhm")?,
        mean_center_ev,
    })
}

// Stage-C parameter order; the trailing block is fixed to consolidated values.
const STAGE_C_NAMES: [&str; 12] = [
    "mean_center",
    "zpl_fwhm",
    "cavity_peak",
    "alpha1",
    "alpha2",
    "spacing",
    "zpl_peak",
    "psb_amplitude",
    "psb_gamma",
    "cavity_fwhm",
    "background",
    "cavity_center",
];

fn coupled_params(p: &[f64], temperature_k: f64) -> CoupledModelParams {
    let [mean_center, zpl_fwhm, cavity_peak, alpha1, alpha2, spacing, zpl_peak, psb_a, psb_gamma, cavity_fwhm, background, cavity_center] =
        *p
    else {
        panic!("stage-C parameter vector has 12 entries");
    };
    let line = |center: f64| EmitterLine {
        zpl: LorentzianParams::new(center, zpl_fwhm, zpl_peak),
        psb: PsbParams {
            center_ev: center,
            amplitude: psb_a,
            gauss_width_ev: psb_gamma,
            temperature_k,
        },
    };
    CoupledModelParams {
        lines: [
            line(mean_center - 0.5 * spacing),
            line(mean_center + 0.5 * spacing),
        ],
        cavity: LorentzianParams::new(cavity_center, cavity_fwhm, cavity_peak),
        alpha: [alpha1, alpha2],
        background,
    }
}

/// Coupled-model fit of one spectrum with the consolidated quantities fixed;
/// free: doublet center, ZPL width, cavity amplitude, and both coupling
/// factors.
pub fn fit_stage_c(
    scan: &DetuningScan,
    index: usize,
    shared: &SharedParams,
    e_c_ev: f64,
    config: &ScanConfig,
) -> Result<FitResult, PipelineError> {
    let spectrum = &scan.spectra[index];
    let energies = spectrum.energies_ev();
    let counts = spectrum.counts();
    let cav_idx = nearest_index(energies, e_c_ev);
    let cavity_peak_seed = (counts[cav_idx] - shared.background.value).max(1.0);
    let center_seed = shared.mean_center_ev.value;
    let (alpha_lo, alpha_hi) = config.alpha_bounds;

    let specs = vec![
        ParamSpec::bounded("mean_center", center_seed, center_seed - 2.0e-3, center_seed + 2.0e-3),
        ParamSpec::bounded(
            "zpl_fwhm",
            shared.zpl_fwhm_stage_a_ev.value.clamp(0.021e-3, 1.9e-3),
            0.02e-3,
            2.0e-3,
        ),
        ParamSpec::bounded("cavity_peak", cavity_peak_seed, 0.0, f64::INFINITY),
        ParamSpec::bounded("alpha1", 0.0, alpha_lo, alpha_hi),
        ParamSpec::bounded("alpha2", 0.0, alpha_lo, alpha_hi),
        ParamSpec::fixed("spacing", shared.spacing_ev.value),
        ParamSpec::fixed("zpl_peak", shared.zpl_peak.value),
        ParamSpec::fixed("psb_amplitude", shared.psb_amplitude.value),
        ParamSpec::fixed("psb_gamma", shared.psb_gamma_ev.value),
        ParamSpec::fixed("cavity_fwhm", shared.cavity_fwhm_ev.value),
        ParamSpec::fixed("background", shared.background.value),
        ParamSpec::fixed("cavity_center", e_c_ev),
    ];
    debug_assert_eq!(specs.len(), STAGE_C_NAMES.len());

    let temperature = scan.temperature_k;
    let mask_max = scan.fit_mask_max_energy_ev;
    let model = move |p: &[f64], x: &[f64], out: &mut [f64]| {
        let params = coupled_params(p, temperature);
        for (o, &e) in out.iter_mut().zip(x) {
            *o = eval_coupled(e, &params);
        }
    };
    fit::fit_spectrum(model, spectrum, |e| e <= mask_max, &specs, &config.fit)
        .map_err(|e| PipelineError::new(Stage::StageC, format!("spectrum {index}: {e}")))
}

/// Model parameters at the stage-C optimum of one spectrum.
pub fn stage_c_params(fit: &FitResult, temperature_k: f64) -> CoupledModelParams {
    coupled_params(&fit.values, temperature_k)
}

/// Run the full pipeline: dispersion, stage A on the red-detuned subset,
/// consolidation over the window, stage C everywhere, and component
/// integration. Deterministic for identical inputs and configuration.
pub fn fit_scan(scan: &DetuningScan, config: &ScanConfig) -> Result<ScanFitReport, PipelineError> {
    let dispersion = extract_cavity_dispersion(scan, config)?;
    fit_scan_with_dispersion(scan, config, dispersion)
}

/// Like [`fit_scan`], but with the cavity energies preset externally
/// instead of detected from the data.
pub fn fit_scan_with_dispersion(
    scan: &DetuningScan,
    config: &ScanConfig,
    dispersion: CavityDispersion,
) -> Result<ScanFitReport, PipelineError> {
    assert_eq!(
        dispersion.preset_ec_ev.len(),
        scan.len(),
        "one preset cavity energy per spectrum"
    );
    let emitter = emitter_reference(scan);
    let n = scan.len();

    let stage_a_indices: Vec<usize> = (0..n)
        .filter(|&i| dispersion.preset_ec_ev[i] - emitter < -config.red_detuned_threshold_ev)
        .collect();
    if stage_a_indices.is_empty() {
        return Err(PipelineError::new(
            Stage::StageA,
            format!(
                "no spectrum has E_c - E_x < -{:.3} meV; cannot form the stage-A subset",
                config.red_detuned_threshold_ev * 1e3
            ),
        )
        .with_partial(PartialReport {
            dispersion: Some(dispersion),
            ..Default::default()
        }));
    }

    let stage_a_results: Vec<Result<(usize, FitResult), PipelineError>> = stage_a_indices
        .par_iter()
        .map(|&i| fit_stage_a(scan, i, dispersion.preset_ec_ev[i], None, config).map(|r| (i, r)))
        .collect();
    let mut stage_a = Vec::with_capacity(stage_a_results.len());
    for r in stage_a_results {
        match r {
            Ok(pair) => stage_a.push(pair),
            Err(e) => {
                return Err(e.with_partial(PartialReport {
                    dispersion: Some(dispersion),
                    stage_a,
                    ..Default::default()
                }))
            }
        }
    }

    let pairs: Vec<(f64, FitResult)> = stage_a
        .iter()
        .map(|(i, fit)| (dispersion.preset_ec_ev[*i], fit.clone()))
        .collect();
    let shared = consolidate_shared(&pairs, scan.consolidation_window_ev).map_err(|e| {
        let partial = PartialReport {
            dispersion: Some(dispersion.clone()),
            stage_a: stage_a.clone(),
            ..Default::default()
        };
        e.with_partial(partial)
    })?;

    let stage_c_results: Vec<Result<FitResult, PipelineError>> = (0..n)
        .into_par_iter()
        .map(|i| fit_stage_c(scan, i, &shared, dispersion.preset_ec_ev[i], config))
        .collect();
    let mut stage_c = Vec::with_capacity(n);
    for r in stage_c_results {
        match r {
            Ok(fit) => stage_c.push(fit),
            Err(e) => {
                return Err(e.with_partial(PartialReport {
                    dispersion: Some(dispersion),
                    stage_a,
                    shared: Some(shared),
                }))
            }
        }
    }

    let temperature = scan.temperature_k;
    let mut records = Vec::with_capacity(n);
    for (i, fit) in stage_c.iter().enumerate() {
        let params = stage_c_params(fit, temperature);
        let integrate = |which| {
            integrate_component(&params, which).map_err(|e| {
                PipelineError::new(Stage::Integration, format!("spectrum {i}: {e}")).with_partial(
                    PartialReport {
                        dispersion: Some(dispersion.clone()),
                        stage_a: stage_a.clone(),
                        shared: Some(shared.clone()),
                    },
                )
            })
        };
        let intensity_cavity = integrate(SpectralComponent::Cavity)?;
        let intensity_lines = [
            integrate(SpectralComponent::Line1)?,
            integrate(SpectralComponent::Line2)?,
        ];
        let mean_center = fit.estimate("mean_center").expect("stage-C parameter");
        records.push(SpectrumRecord {
            index: i,
            scan_coord: scan.scan_coord[i],
            e_c_ev: dispersion.preset_ec_ev[i],
            detuning_ev: dispersion.preset_ec_ev[i] - mean_center.value,
            mean_center_ev: mean_center,
            zpl_fwhm_ev: fit.estimate("zpl_fwhm").expect("stage-C parameter"),
            cavity_peak: fit.estimate("cavity_peak").expect("stage-C parameter"),
            alpha: [
                fit.estimate("alpha1").expect("stage-C parameter"),
                fit.estimate("alpha2").expect("stage-C parameter"),
            ],
            intensity_cavity,
            intensity_lines,
            chi2: fit.chi2,
            dof: fit.dof,
            converged: fit.converged,
            n_iter: fit.n_iter,
        });
    }

    let widths: Vec<WeightedSample> = stage_c
        .iter()
        .filter(|f| f.converged)
        .map(|f| sigma_floor(f.estimate("zpl_fwhm").expect("stage-C parameter")))
        .collect();
    let zpl_fwhm_weighted_ev = fit::weighted_average(&widths).map_err(|e| {
        PipelineError::new(Stage::StageC, e.to_string()).with_partial(PartialReport {
            dispersion: Some(dispersion.clone()),
            stage_a: stage_a.clone(),
            shared: Some(shared.clone()),
        })
    })?;

    let all_converged =
        stage_a.iter().all(|(_, f)| f.converged) && stage_c.iter().all(|f| f.converged);

    Ok(ScanFitReport {
        dispersion,
        stage_a_indices,
        shared,
        records,
        zpl_fwhm_weighted_ev,
        all_converged,
    })
}
