//! Seeded synthetic-data generators.
//!
//! Every generator draws per-bin Poisson counts around an analytic
//! expectation, and that expectation is computed by the same evaluators the
//! fitting code uses ([`crate::model`], [`crate::timedomain`]), so recovery
//! tests exercise exactly the model they check. Randomness comes from the
//! counter-based ChaCha8 stream cipher seeded per dataset; scan generators
//! derive one independent seed per spectrum by splitmix64 mixing, so results
//! do not depend on generation order or thread count.

use crate::model::{eval_coupled, CoupledModelParams, EmitterLine, LorentzianParams};
use crate::scan::{DetuningScan, DEFAULT_MASK_MAX_EV, DEFAULT_WINDOW_EV};
use crate::spectrum::{EnergyGrid, Spectrum};
use crate::timedomain::{
    self, convolve_with_irf, g2_ideal, CorrelationHistogram, IrfModel, TimeGrid,
    DEFAULT_OVERSAMPLE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// splitmix64 round; mixes a base seed with a stream index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Poisson draw guarded against the sampler's misbehavior at extreme
/// arguments (rand_distr returns -1 for lambda below ~1e-7; the hit
/// probability there is negligible anyway).
pub fn poisson_counts(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 1e-9 {
        return 0.0;
    }
    Poisson::new(lambda)
        .expect("positive lambda")
        .sample(rng)
        .max(0.0)
}

/// Poisson counts around `exposure * eval_coupled(E)` on the given grid.
pub fn synth_spectrum(
    truth: &CoupledModelParams,
    grid: &EnergyGrid,
    exposure: f64,
    seed: u64,
) -> Spectrum {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let energies = grid.points();
    let counts = energies
        .iter()
        .map(|&e| poisson_counts(&mut rng, exposure * eval_coupled(e, truth)))
        .collect();
    Spectrum::new(energies, counts, None).expect("generated spectrum is valid")
}

/// Detuning-dependent cavity amplitude: a base level, a broad lobe at
/// negative detuning, and a dip at zero detuning.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CavityAmplitudeProfile {
    pub base: f64,
    pub lobe_amp: f64,
    pub lobe_center_ev: f64,
    pub lobe_width_ev: f64,
    pub dip_amp: f64,
    pub dip_width_ev: f64,
}

impl CavityAmplitudeProfile {
    pub fn eval(&self, detuning_ev: f64) -> f64 {
        let lobe = ((detuning_ev - self.lobe_center_ev) / self.lobe_width_ev).powi(2);
        let dip = (detuning_ev / self.dip_width_ev).powi(2);
        (self.base + self.lobe_amp * (-0.5 * lobe).exp() - self.dip_amp * (-0.5 * dip).exp())
            .max(0.0)
    }
}

/// Per-line coupling factor versus detuning: a Gaussian lobe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlphaProfile {
    pub peak: [f64; 2],
    pub center_ev: [f64; 2],
    pub width_ev: [f64; 2],
}

impl AlphaProfile {
    pub fn eval(&self, line: usize, detuning_ev: f64) -> f64 {
        let z = (detuning_ev - self.center_ev[line]) / self.width_ev[line];
        self.peak[line] * (-0.5 * z * z).exp()
    }
}

/// Shared emitter truth: the doublet parameters that stay constant along a scan.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmitterTruth {
    pub mean_center_ev: f64,
    pub spacing_ev: f64,
    pub zpl_peak: f64,
    pub zpl_fwhm_ev: f64,
    pub psb_amplitude: f64,
    pub psb_gamma_ev: f64,
}

/// Ground truth of a full detuning scan: shared emitter parameters, the
/// cavity dispersion law, and amplitude/coupling profiles versus detuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanTruth {
    pub emitter: EmitterTruth,
    pub cavity_fwhm_ev: f64,
    pub cavity_profile: CavityAmplitudeProfile,
    pub alpha_profile: AlphaProfile,
    pub background: f64,
    pub temperature_k: f64,
    /// Cavity energy at the first and last scan step.
    pub ec_start_ev: f64,
    pub ec_end_ev: f64,
    /// Quadratic bow of the dispersion, maximal mid-scan.
    pub ec_bow_ev: f64,
    pub n_spectra: usize,
    pub exposure: f64,
    pub noise_seed: u64,
}

impl ScanTruth {
    /// Cavity energy at scan step `i` (linear ramp plus quadratic bow).
    pub fn ec_at(&self, i: usize) -> f64 {
        let s = if self.n_spectra > 1 {
            i as f64 / (self.n_spectra - 1) as f64
        } else {
            0.0
        };
        self.ec_start_ev + (self.ec_end_ev - self.ec_start_ev) * s
            + self.ec_bow_ev * 4.0 * s * (1.0 - s)
    }

    pub fn detuning_at(&self, i: usize) -> f64 {
        self.ec_at(i) - self.emitter.mean_center_ev
    }

    /// Full coupled-model parameters for scan step `i`.
    pub fn params_at(&self, i: usize) -> CoupledModelParams {
        let em = &self.emitter;
        let ec = self.ec_at(i);
        let detuning = ec - em.mean_center_ev;
        let line = |center: f64| {
            EmitterLine::new(
                LorentzianParams::new(center, em.zpl_fwhm_ev, em.zpl_peak),
                em.psb_amplitude,
                em.psb_gamma_ev,
                self.temperature_k,
            )
        };
        CoupledModelParams {
            lines: [
                line(em.mean_center_ev - 0.5 * em.spacing_ev),
                line(em.mean_center_ev + 0.5 * em.spacing_ev),
            ],
            cavity: LorentzianParams::new(ec, self.cavity_fwhm_ev, self.cavity_profile.eval(detuning)),
            alpha: [
                self.alpha_profile.eval(0, detuning),
                self.alpha_profile.eval(1, detuning),
            ],
            background: self.background,
        }
    }

    pub fn per_spectrum(&self) -> Vec<CoupledModelParams> {
        (0..self.n_spectra).map(|i| self.params_at(i)).collect()
    }
}

/// One Poisson spectrum per scan step; masks and consolidation window are
/// set to the pipeline defaults.
pub fn synth_scan(truth: &ScanTruth, grid: &EnergyGrid) -> DetuningScan {
    let spectra: Vec<Spectrum> = (0..truth.n_spectra)
        .map(|i| {
            synth_spectrum(
                &truth.params_at(i),
                grid,
                truth.exposure,
                derive_seed(truth.noise_seed, i as u64),
            )
        })
        .collect();
    let scan_coord: Vec<f64> = (0..truth.n_spectra).map(|i| i as f64).collect();
    DetuningScan::new(
        spectra,
        scan_coord,
        truth.temperature_k,
        DEFAULT_MASK_MAX_EV,
        DEFAULT_WINDOW_EV,
    )
    .expect("synthetic scan is valid")
}

/// Ground truth for an antibunching histogram.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StreamTruth {
    pub p: f64,
    pub tau1_ns: f64,
    pub t0_ns: f64,
    pub irf: IrfModel,
    /// Expected counts per bin at long delays.
    pub tail_counts: f64,
}

/// Expected counts per bin: `tail_counts` times the IRF-convolved dip.
pub fn g2_expectation(truth: &StreamTruth, grid: &TimeGrid) -> Vec<f64> {
    let (p, tau1, t0) = (truth.p, truth.tau1_ns, truth.t0_ns);
    let ideal = move |t: f64| g2_ideal(t - t0, p, tau1);
    convolve_with_irf(ideal, &truth.irf, grid, DEFAULT_OVERSAMPLE)
        .expect("synthesis grid spans the response")
        .into_iter()
        .map(|v| truth.tail_counts * v)
        .collect()
}

/// Poisson antibunching histogram over `tau` in `[-span, span]`.
pub fn synth_g2_histogram(
    truth: &StreamTruth,
    bin_width_ns: f64,
    span_ns: f64,
    seed: u64,
) -> CorrelationHistogram {
    let n = (2.0 * span_ns / bin_width_ns).round() as usize + 1;
    let grid = TimeGrid {
        start_ns: -span_ns,
        step_ns: bin_width_ns,
        n,
    };
    let expectation = g2_expectation(truth, &grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = expectation
        .iter()
        .map(|&lambda| poisson_counts(&mut rng, lambda))
        .collect();
    CorrelationHistogram::from_start(grid.start_ns, bin_width_ns, counts)
        .expect("generated histogram is valid")
}

/// Ground truth for a decay histogram.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayTruth {
    pub tau1_ns: f64,
    pub t0_ns: f64,
    pub irf: IrfModel,
    pub amplitude: f64,
    pub baseline: f64,
}

impl DecayTruth {
    /// Calibrate the amplitude so the convolved peak expectation reaches
    /// `peak_counts` on the given grid.
    pub fn with_peak_counts(
        tau1_ns: f64,
        t0_ns: f64,
        irf: IrfModel,
        peak_counts: f64,
        baseline: f64,
        grid: &TimeGrid,
    ) -> Self {
        let unit = Self {
            tau1_ns,
            t0_ns,
            irf,
            amplitude: 1.0,
            baseline: 0.0,
        };
        let peak = decay_expectation(&unit, grid)
            .into_iter()
            .fold(0.0_f64, f64::max);
        Self {
            tau1_ns,
            t0_ns,
            irf,
            amplitude: peak_counts / peak,
            baseline,
        }
    }
}

/// Expected counts per bin: IRF-convolved one-sided exponential plus baseline.
pub fn decay_expectation(truth: &DecayTruth, grid: &TimeGrid) -> Vec<f64> {
    let (amp, tau1, t0) = (truth.amplitude, truth.tau1_ns, truth.t0_ns);
    let tap_width = grid.step_ns / DEFAULT_OVERSAMPLE as f64;
    let ideal = move |t: f64| amp * timedomain::decay_pulse(t - t0, tau1, tap_width);
    convolve_with_irf(ideal, &truth.irf, grid, DEFAULT_OVERSAMPLE)
        .expect("synthesis grid spans the response")
        .into_iter()
        .map(|v| v + truth.baseline)
        .collect()
}

/// Poisson decay histogram over `t` in `[t_start, t_end]`.
pub fn synth_decay_histogram(
    truth: &DecayTruth,
    bin_width_ns: f64,
    t_start_ns: f64,
    t_end_ns: f64,
    seed: u64,
) -> CorrelationHistogram {
    let n = ((t_end_ns - t_start_ns) / bin_width_ns).round() as usize + 1;
    let grid = TimeGrid {
        start_ns: t_start_ns,
        step_ns: bin_width_ns,
        n,
    };
    let expectation = decay_expectation(truth, &grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = expectation
        .iter()
        .map(|&lambda| poisson_counts(&mut rng, lambda))
        .collect();
    CorrelationHistogram::from_start(t_start_ns, bin_width_ns, counts)
        .expect("generated histogram is valid")
}

/// Canned ground-truth scenarios used by the CLI and the acceptance suite.
pub mod scenarios {
    use super::*;
    use crate::model::{integrate_component, SpectralComponent};

    pub const SCAN_SPACING_EV: f64 = 0.4715e-3;
    pub const SCAN_PSB_GAMMA_EV: f64 = 1.20e-3;
    pub const SCAN_CAVITY_FWHM_EV: f64 = 2.30e-3;
    pub const SCAN_ZPL_FWHM_EV: f64 = 0.2054e-3;
    pub const SCAN_MEAN_CENTER_EV: f64 = 1.9490;
    pub const SCAN_ZPL_PEAK: f64 = 3000.0;
    pub const SCAN_PSB_AMPLITUDE: f64 = 2.0e6;
    pub const SCAN_BACKGROUND: f64 = 20.0;
    pub const SCAN_TEMPERATURE_K: f64 = 4.0;

    /// Energy grid shared by the scan scenarios.
    pub fn scan_grid() -> EnergyGrid {
        EnergyGrid::span(1.9340, 1.9560, 3.0e-5)
    }

    fn base_emitter() -> EmitterTruth {
        EmitterTruth {
            mean_center_ev: SCAN_MEAN_CENTER_EV,
            spacing_ev: SCAN_SPACING_EV,
            zpl_peak: SCAN_ZPL_PEAK,
            zpl_fwhm_ev: SCAN_ZPL_FWHM_EV,
            psb_amplitude: SCAN_PSB_AMPLITUDE,
            psb_gamma_ev: SCAN_PSB_GAMMA_EV,
        }
    }

    /// A realistic detuning scan: cavity amplitude peaks at negative
    /// detuning and dips on resonance; coupling factors concentrate at
    /// negative detuning.
    pub fn paper_scan(n_spectra: usize, seed: u64) -> (ScanTruth, EnergyGrid) {
        let truth = ScanTruth {
            emitter: base_emitter(),
            cavity_fwhm_ev: SCAN_CAVITY_FWHM_EV,
            cavity_profile: CavityAmplitudeProfile {
                base: 300.0,
                lobe_amp: 2200.0,
                lobe_center_ev: -1.5e-3,
                lobe_width_ev: 2.0e-3,
                dip_amp: 1500.0,
                dip_width_ev: 0.5e-3,
            },
            alpha_profile: AlphaProfile {
                peak: [5.0, 3.5],
                center_ev: [-0.8e-3, -0.8e-3],
                width_ev: [2.0e-3, 2.0e-3],
            },
            background: SCAN_BACKGROUND,
            temperature_k: SCAN_TEMPERATURE_K,
            ec_start_ev: 1.9400,
            ec_end_ev: 1.9555,
            ec_bow_ev: 0.3e-3,
            n_spectra,
            exposure: 1.0,
            noise_seed: seed,
        };
        (truth, scan_grid())
    }

    /// Fractional overlap gain of line 1 when the cavity filter at unit
    /// coupling sits at the given detuning:
    /// `(integral with alpha=1) / (integral with alpha=0) - 1`.
    fn line1_overlap(truth: &ScanTruth, detuning_ev: f64) -> f64 {
        let mut params = truth.params_at(0);
        params.cavity.center_ev = truth.emitter.mean_center_ev + detuning_ev;
        params.cavity.peak = 1.0;
        params.alpha = [1.0, 0.0];
        let with = integrate_component(&params, SpectralComponent::Line1)
            .expect("overlap integral converges");
        params.alpha = [0.0, 0.0];
        let without = integrate_component(&params, SpectralComponent::Line1)
            .expect("overlap integral converges");
        with / without - 1.0
    }

    /// Scan whose line-1 detected intensity is enhanced by `target_ratio`
    /// when the cavity crosses that line. Returns the truth and the exact
    /// encoded ratio.
    pub fn enhancement_scan(
        n_spectra: usize,
        seed: u64,
        target_ratio: f64,
    ) -> (ScanTruth, EnergyGrid, f64) {
        let (mut truth, grid) = paper_scan(n_spectra, seed);
        let line1_detuning = -0.5 * truth.emitter.spacing_ev;
        truth.alpha_profile = AlphaProfile {
            peak: [1.0, 1.0],
            center_ev: [line1_detuning, line1_detuning],
            width_ev: [2.0e-3, 2.0e-3],
        };
        let overlap = line1_overlap(&truth, line1_detuning);
        let alpha_max = (target_ratio - 1.0) / overlap;
        truth.alpha_profile.peak = [alpha_max, alpha_max];
        // Keep the cavity feature itself modest so the emitter seeds stay
        // unambiguous near resonance.
        truth.cavity_profile = CavityAmplitudeProfile {
            base: 400.0,
            lobe_amp: 1200.0,
            lobe_center_ev: -1.5e-3,
            lobe_width_ev: 2.0e-3,
            dip_amp: 800.0,
            dip_width_ev: 0.5e-3,
        };
        (truth, grid, target_ratio)
    }

    pub const G2_P: f64 = 0.73;
    pub const G2_TAU1_NS: f64 = 1.954;
    pub const IRF_SCALE_NS: f64 = 0.5;
    pub const IRF_SHAPE: f64 = 3.0;

    /// Antibunching stream with a skewed 0.5 ns response and a 100-count tail.
    pub fn paper_g2(seed: u64) -> (StreamTruth, f64, f64, u64) {
        let truth = StreamTruth {
            p: G2_P,
            tau1_ns: G2_TAU1_NS,
            t0_ns: 0.0,
            irf: IrfModel {
                location_ns: 0.0,
                scale_ns: IRF_SCALE_NS,
                shape: IRF_SHAPE,
            },
            tail_counts: 100.0,
        };
        (truth, 0.1, 100.0, seed)
    }

    pub const LIFETIME_TAU1_NS: f64 = 1.954;
    pub const LIFETIME_SPARSE_TAU1_NS: f64 = 2.0;

    /// Decay histogram geometry shared by the lifetime scenarios.
    pub fn lifetime_grid() -> TimeGrid {
        TimeGrid {
            start_ns: 0.0,
            step_ns: 0.1,
            n: 451,
        }
    }

    /// Pulsed decay at paper-scale statistics (~150 counts at the peak).
    pub fn paper_lifetime() -> DecayTruth {
        let irf = IrfModel {
            location_ns: 0.0,
            scale_ns: IRF_SCALE_NS,
            shape: IRF_SHAPE,
        };
        DecayTruth::with_peak_counts(LIFETIME_TAU1_NS, 8.0, irf, 150.0, 0.5, &lifetime_grid())
    }

    /// Sparse-count decay (~35 counts at the peak).
    pub fn sparse_lifetime() -> DecayTruth {
        let irf = IrfModel {
            location_ns: 0.0,
            scale_ns: IRF_SCALE_NS,
            shape: IRF_SHAPE,
        };
        DecayTruth::with_peak_counts(
            LIFETIME_SPARSE_TAU1_NS,
            8.0,
            irf,
            35.0,
            0.2,
            &lifetime_grid(),
        )
    }
}
