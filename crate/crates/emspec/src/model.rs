//! Lineshape models for cavity-coupled quantum emitters.
//!
//! The spectrum of one emitter is a zero-phonon line (ZPL, a Lorentzian)
//! plus an acoustic-phonon sideband (PSB): a Gaussian envelope times the
//! one-phonon spectral weight `|E - E_x|` times the thermal emission /
//! absorption factor. Two such emitter lines, a cavity Lorentzian, and a
//! constant background combine either additively or through per-line cavity
//! coupling factors that scale each line by `1 + alpha_i * I'_c(E)` with
//! `I'_c` the peak-normalized cavity intensity.

use crate::constants::BOLTZMANN_EV_PER_K;
use crate::quad::{self, QuadError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{context}: fwhm must be positive (got {value})")]
    NonPositiveFwhm { context: &'static str, value: f64 },
    #[error("{context}: peak must be non-negative (got {value})")]
    NegativePeak { context: &'static str, value: f64 },
    #[error("cavity filter is undefined for zero cavity peak")]
    ZeroCavityPeak,
    #[error("psb amplitude must be non-negative (got {0})")]
    NegativePsbAmplitude(f64),
    #[error("psb gaussian width must be positive (got {0})")]
    NonPositivePsbWidth(f64),
    #[error("temperature must be positive (got {0})")]
    NonPositiveTemperature(f64),
    #[error("emitter line centers must differ: zpl at {zpl}, psb at {psb}")]
    CenterMismatch { zpl: f64, psb: f64 },
    #[error("line 1 center ({0}) must lie below line 2 center ({1})")]
    LineOrder(f64, f64),
    #[error("coupling factor alpha must be >= -1 (got {0})")]
    AlphaBelowMinusOne(f64),
    #[error("background must be non-negative (got {0})")]
    NegativeBackground(f64),
    #[error("parameter is not finite")]
    NonFinite,
}

/// Peak-height Lorentzian: `L(E) = peak * (fwhm/2)^2 / ((E-center)^2 + (fwhm/2)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianParams {
    pub center_ev: f64,
    pub fwhm_ev: f64,
    pub peak: f64,
}

impl LorentzianParams {
    pub fn new(center_ev: f64, fwhm_ev: f64, peak: f64) -> Self {
        Self {
            center_ev,
            fwhm_ev,
            peak,
        }
    }

    pub fn validate(&self, context: &'static str) -> Result<(), ModelError> {
        if !(self.center_ev.is_finite() && self.fwhm_ev.is_finite() && self.peak.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        if self.fwhm_ev <= 0.0 {
            return Err(ModelError::NonPositiveFwhm {
                context,
                value: self.fwhm_ev,
            });
        }
        if self.peak < 0.0 {
            return Err(ModelError::NegativePeak {
                context,
                value: self.peak,
            });
        }
        Ok(())
    }

    /// Analytic area `pi * peak * fwhm / 2`.
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.peak * self.fwhm_ev / 2.0
    }
}

/// Acoustic phonon sideband attached to an emitter line at `center_ev`.
///
/// `amplitude` carries counts/eV so that the sideband intensity is in counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsbParams {
    pub center_ev: f64,
    pub amplitude: f64,
    pub gauss_width_ev: f64,
    pub temperature_k: f64,
}

impl PsbParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.center_ev.is_finite()
            && self.amplitude.is_finite()
            && self.gauss_width_ev.is_finite()
            && self.temperature_k.is_finite())
        {
            return Err(ModelError::NonFinite);
        }
        if self.amplitude < 0.0 {
            return Err(ModelError::NegativePsbAmplitude(self.amplitude));
        }
        if self.gauss_width_ev <= 0.0 {
            return Err(ModelError::NonPositivePsbWidth(self.gauss_width_ev));
        }
        if self.temperature_k <= 0.0 {
            return Err(ModelError::NonPositiveTemperature(self.temperature_k));
        }
        Ok(())
    }
}

/// One emitter line: ZPL plus its sideband, sharing the same center energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterLine {
    pub zpl: LorentzianParams,
    pub psb: PsbParams,
}

impl EmitterLine {
    /// Builds a line whose sideband center is tied to the ZPL center.
    pub fn new(
        zpl: LorentzianParams,
        psb_amplitude: f64,
        psb_gauss_width_ev: f64,
        temperature_k: f64,
    ) -> Self {
        let psb = PsbParams {
            center_ev: zpl.center_ev,
            amplitude: psb_amplitude,
            gauss_width_ev: psb_gauss_width_ev,
            temperature_k,
        };
        Self { zpl, psb }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.zpl.validate("zpl")?;
        self.psb.validate()?;
        if self.zpl.center_ev != self.psb.center_ev {
            return Err(ModelError::CenterMismatch {
                zpl: self.zpl.center_ev,
                psb: self.psb.center_ev,
            });
        }
        Ok(())
    }

    pub fn center_ev(&self) -> f64 {
        self.zpl.center_ev
    }
}

/// Full parameter set of the coupled two-line model: an emitter doublet,
/// a cavity Lorentzian, per-line coupling factors, and a flat background.
///
/// Line index 0 is the lower-energy feature, index 1 the higher-energy one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledModelParams {
    pub lines: [EmitterLine; 2],
    pub cavity: LorentzianParams,
    pub alpha: [f64; 2],
    pub background: f64,
}

impl CoupledModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for line in &self.lines {
            line.validate()?;
        }
        self.cavity.validate("cavity")?;
        if self.lines[0].center_ev() >= self.lines[1].center_ev() {
            return Err(ModelError::LineOrder(
                self.lines[0].center_ev(),
                self.lines[1].center_ev(),
            ));
        }
        for &a in &self.alpha {
            if !a.is_finite() {
                return Err(ModelError::NonFinite);
            }
            if a < -1.0 {
                return Err(ModelError::AlphaBelowMinusOne(a));
            }
        }
        if !self.background.is_finite() {
            return Err(ModelError::NonFinite);
        }
        if self.background < 0.0 {
            return Err(ModelError::NegativeBackground(self.background));
        }
        Ok(())
    }
}

/// Lorentzian normalized to 1 at its center.
#[inline]
fn unit_lorentzian(e_ev: f64, center_ev: f64, fwhm_ev: f64) -> f64 {
    let hw = 0.5 * fwhm_ev;
    let d = e_ev - center_ev;
    hw * hw / (d * d + hw * hw)
}

/// Evaluate a peak-height Lorentzian.
#[inline]
pub fn eval_lorentzian(e_ev: f64, p: &LorentzianParams) -> f64 {
    p.peak * unit_lorentzian(e_ev, p.center_ev, p.fwhm_ev)
}

/// Evaluate the phonon sideband.
///
/// Below the line center the factor `Theta + n_B` describes phonon emission
/// (`1 + n_B`), above it phonon absorption (`n_B` alone). The removable
/// singularity at the center is replaced by its two-sided limit
/// `amplitude * k_B * T`.
#[inline]
pub fn eval_psb(e_ev: f64, p: &PsbParams) -> f64 {
    let kt = BOLTZMANN_EV_PER_K * p.temperature_k;
    let de = e_ev - p.center_ev;
    if de == 0.0 {
        return p.amplitude * kt;
    }
    let x = de.abs();
    let ratio = x / p.gauss_width_ev;
    let envelope = (-ratio * ratio).exp();
    // x / (e^(x/kT) - 1) via exp_m1 keeps the small-x limit accurate.
    let bose = x / (x / kt).exp_m1();
    let stokes = if de < 0.0 { x } else { 0.0 };
    p.amplitude * envelope * (stokes + bose)
}

/// Peak-normalized cavity intensity `I'_c(E) = I_c(E) / I_c(E_c)`, in `[0, 1]`.
pub fn cavity_filter(e_ev: f64, cavity: &LorentzianParams) -> Result<f64, ModelError> {
    if cavity.peak <= 0.0 {
        return Err(ModelError::ZeroCavityPeak);
    }
    Ok(unit_lorentzian(e_ev, cavity.center_ev, cavity.fwhm_ev))
}

/// Additive superposition: both emitter lines, the cavity mode, and the
/// background with no emitter-cavity coupling.
#[inline]
pub fn eval_additive(e_ev: f64, p: &CoupledModelParams) -> f64 {
    let mut acc = p.background + eval_lorentzian(e_ev, &p.cavity);
    for line in &p.lines {
        acc += eval_lorentzian(e_ev, &line.zpl) + eval_psb(e_ev, &line.psb);
    }
    acc
}

/// Coupled model: each emitter line is scaled by `1 + alpha_i * I'_c(E)`.
///
/// Reduces exactly to [`eval_additive`] when both coupling factors vanish.
#[inline]
pub fn eval_coupled(e_ev: f64, p: &CoupledModelParams) -> f64 {
    let filter = unit_lorentzian(e_ev, p.cavity.center_ev, p.cavity.fwhm_ev);
    let mut acc = p.background + eval_lorentzian(e_ev, &p.cavity);
    for (line, &alpha) in p.lines.iter().zip(&p.alpha) {
        let emitter = eval_lorentzian(e_ev, &line.zpl) + eval_psb(e_ev, &line.psb);
        acc += emitter * (1.0 + alpha * filter);
    }
    acc
}

/// Which integrated intensity to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralComponent {
    Cavity,
    Line1,
    Line2,
}

const INTEGRAL_REL_TOL: f64 = 1e-6;
/// Integration window extends this many half-widths beyond every component.
const WINDOW_HALF_WIDTHS: f64 = 20.0;

/// Integration window spanning `WINDOW_HALF_WIDTHS` half-widths of every
/// model component (ZPL and cavity half-widths, PSB Gaussian width).
fn integration_window(p: &CoupledModelParams) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut cover = |center: f64, half_width: f64| {
        lo = lo.min(center - WINDOW_HALF_WIDTHS * half_width);
        hi = hi.max(center + WINDOW_HALF_WIDTHS * half_width);
    };
    for line in &p.lines {
        cover(line.zpl.center_ev, 0.5 * line.zpl.fwhm_ev);
        cover(line.psb.center_ev, line.psb.gauss_width_ev);
    }
    cover(p.cavity.center_ev, 0.5 * p.cavity.fwhm_ev);
    (lo, hi)
}

/// Integrated intensity of one model component.
///
/// The cavity integral runs over the whole real line (a tangent substitution
/// captures the Lorentzian tails), so it matches the analytic area
/// `pi * peak * fwhm / 2` to the quadrature tolerance. Line integrals
/// `int (I_ZPL,i + I_PSB,i) * (1 + alpha_i * I'_c) dE` use adaptive
/// quadrature over the finite window returned by [`integration_window`];
/// Lorentzian tail mass beyond that window is truncated.
pub fn integrate_component(
    p: &CoupledModelParams,
    which: SpectralComponent,
) -> Result<f64, QuadError> {
    match which {
        SpectralComponent::Cavity => {
            if p.cavity.peak == 0.0 {
                return Ok(0.0);
            }
            let cavity = p.cavity;
            let q = quad::integrate_infinite(
                move |e| eval_lorentzian(e, &cavity),
                cavity.center_ev,
                0.5 * cavity.fwhm_ev,
                INTEGRAL_REL_TOL,
            )?;
            Ok(q.value)
        }
        SpectralComponent::Line1 | SpectralComponent::Line2 => {
            let idx = if which == SpectralComponent::Line1 { 0 } else { 1 };
            let line = p.lines[idx];
            let alpha = p.alpha[idx];
            let cavity = p.cavity;
            let (lo, hi) = integration_window(p);
            let integrand = move |e: f64| {
                let emitter = eval_lorentzian(e, &line.zpl) + eval_psb(e, &line.psb);
                let filter = unit_lorentzian(e, cavity.center_ev, cavity.fwhm_ev);
                emitter * (1.0 + alpha * filter)
            };
            let q = quad::adaptive(integrand, lo, hi, INTEGRAL_REL_TOL, 0.0)?;
            Ok(q.value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::BOLTZMANN_EV_PER_K;
    use approx::assert_relative_eq;

    fn sample_params() -> CoupledModelParams {
        let t = 4.0;
        CoupledModelParams {
            lines: [
                EmitterLine::new(
                    LorentzianParams::new(1.94876, 0.205e-3, 3000.0),
                    2.0e6,
                    1.2e-3,
                    t,
                ),
                EmitterLine::new(
                    LorentzianParams::new(1.94924, 0.205e-3, 3000.0),
                    2.0e6,
                    1.2e-3,
                    t,
                ),
            ],
            cavity: LorentzianParams::new(1.9440, 2.3e-3, 800.0),
            alpha: [0.0, 0.0],
            background: 20.0,
        }
    }

    #[test]
    fn lorentzian_peak_and_half_width() {
        let p = LorentzianParams::new(1.95, 2.3e-3, 7.0);
        assert_eq!(eval_lorentzian(1.95, &p), 7.0);
        assert_relative_eq!(
            eval_lorentzian(1.95 + 1.15e-3, &p),
            3.5,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            eval_lorentzian(1.95 - 1.15e-3, &p),
            3.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn psb_center_value_is_continuous_limit() {
        let p = PsbParams {
            center_ev: 1.949,
            amplitude: 5.0e5,
            gauss_width_ev: 1.2e-3,
            temperature_k: 4.0,
        };
        let kt = BOLTZMANN_EV_PER_K * 4.0;
        assert_relative_eq!(kt, 0.00034469, max_relative = 1e-4);
        assert_eq!(eval_psb(1.949, &p), p.amplitude * kt);
        // Both one-sided values deviate from the limit by the first-order
        // term eps/(2 kT); check convergence at that analytic rate.
        for eps in [1e-9, 1e-10, 1e-11] {
            let bound = 1.01 * eps / (2.0 * kt) + 1e-12;
            for e in [1.949 + eps, 1.949 - eps] {
                let rel = (eval_psb(e, &p) - p.amplitude * kt).abs() / (p.amplitude * kt);
                assert!(rel <= bound, "eps {eps}: rel {rel} > {bound}");
            }
        }
    }

    #[test]
    fn psb_zero_amplitude_vanishes() {
        let p = PsbParams {
            center_ev: 1.949,
            amplitude: 0.0,
            gauss_width_ev: 1.2e-3,
            temperature_k: 4.0,
        };
        assert_eq!(eval_psb(1.95, &p), 0.0);
        assert_eq!(eval_psb(1.949, &p), 0.0);
    }

    #[test]
    fn psb_detailed_balance_at_one_thermal_quantum() {
        let p = PsbParams {
            center_ev: 1.949,
            amplitude: 1.0e6,
            gauss_width_ev: 1.2e-3,
            temperature_k: 4.0,
        };
        let delta = BOLTZMANN_EV_PER_K * 4.0; // so delta / kT = 1
        let ratio = eval_psb(1.949 - delta, &p) / eval_psb(1.949 + delta, &p);
        assert_relative_eq!(ratio, std::f64::consts::E, max_relative = 1e-12);
    }

    #[test]
    fn cavity_filter_definition() {
        let c = LorentzianParams::new(1.944, 2.3e-3, 800.0);
        assert_eq!(cavity_filter(1.944, &c).unwrap(), 1.0);
        assert_relative_eq!(
            cavity_filter(1.944 + 1.15e-3, &c).unwrap(),
            0.5,
            max_relative = 1e-12
        );
        assert!(cavity_filter(2.5, &c).unwrap() < 1e-4);
        let zero = LorentzianParams::new(1.944, 2.3e-3, 0.0);
        assert_eq!(
            cavity_filter(1.944, &zero).unwrap_err(),
            ModelError::ZeroCavityPeak
        );
    }

    #[test]
    fn additive_background_only() {
        let mut p = sample_params();
        for line in &mut p.lines {
            line.zpl.peak = 0.0;
            line.psb.amplitude = 0.0;
        }
        p.cavity.peak = 0.0;
        p.background = 5.0;
        assert_eq!(eval_additive(1.95, &p), 5.0);
    }

    #[test]
    fn coupled_reduces_to_additive_at_zero_alpha() {
        let p = sample_params();
        for i in 0..200 {
            let e = 1.93 + i as f64 * 1.5e-4;
            assert_eq!(eval_coupled(e, &p), eval_additive(e, &p));
        }
    }

    #[test]
    fn coupled_doubles_line_term_at_unit_alpha_on_resonance() {
        let mut p = sample_params();
        // Put the cavity exactly on line 1 so the filter is 1 there.
        p.cavity.center_ev = p.lines[0].center_ev();
        let e = p.cavity.center_ev;
        let base = eval_coupled(e, &p);
        p.alpha[0] = 1.0;
        let boosted = eval_coupled(e, &p);
        let line1 = eval_lorentzian(e, &p.lines[0].zpl) + eval_psb(e, &p.lines[0].psb);
        assert_relative_eq!(boosted - base, line1, max_relative = 1e-12);
    }

    #[test]
    fn far_tail_approaches_background() {
        let mut p = sample_params();
        // Comparable peak and background so the tail bound is meaningful.
        for line in &mut p.lines {
            line.zpl.peak = 1.0;
            line.psb.amplitude = 1.0;
        }
        p.cavity.peak = 1.0;
        p.background = 5.0;
        // 50 cavity FWHM beyond the outermost center.
        let e = p.lines[1].center_ev() + 50.0 * p.cavity.fwhm_ev;
        let v = eval_coupled(e, &p);
        assert!((v - p.background).abs() <= 1e-3 * p.background);
    }

    #[test]
    fn cavity_integral_matches_closed_form() {
        let mut p = sample_params();
        p.cavity = LorentzianParams::new(1.944, 2.30e-3, 1.0);
        let q = integrate_component(&p, SpectralComponent::Cavity).unwrap();
        let closed = p.cavity.area();
        assert_relative_eq!(closed, 3.6128e-3, max_relative = 1e-4);
        assert_relative_eq!(q, closed, max_relative = 1e-6);
    }

    #[test]
    fn line_integral_zero_for_zero_amplitudes() {
        let mut p = sample_params();
        p.lines[0].zpl.peak = 0.0;
        p.lines[0].psb.amplitude = 0.0;
        let q = integrate_component(&p, SpectralComponent::Line1).unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn line_integral_splits_at_zero_alpha() {
        let p = sample_params();
        let total = integrate_component(&p, SpectralComponent::Line1).unwrap();
        let (lo, hi) = super::integration_window(&p);
        let zpl = p.lines[0].zpl;
        let psb = p.lines[0].psb;
        let q_zpl = quad::adaptive(|e| eval_lorentzian(e, &zpl), lo, hi, 1e-9, 0.0).unwrap();
        let q_psb = quad::adaptive(|e| eval_psb(e, &psb), lo, hi, 1e-9, 0.0).unwrap();
        assert_relative_eq!(total, q_zpl.value + q_psb.value, max_relative = 1e-6);
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut p = sample_params();
        p.alpha[0] = -1.5;
        assert_eq!(p.validate(), Err(ModelError::AlphaBelowMinusOne(-1.5)));
        let mut p = sample_params();
        p.lines[1].zpl.center_ev = p.lines[0].center_ev();
        p.lines[1].psb.center_ev = p.lines[0].center_ev();
        assert!(matches!(p.validate(), Err(ModelError::LineOrder(_, _))));
        let mut p = sample_params();
        p.lines[0].psb.center_ev += 1e-6;
        assert!(matches!(p.validate(), Err(ModelError::CenterMismatch { .. })));
    }
}
