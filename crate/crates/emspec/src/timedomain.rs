//! Second-order correlation and lifetime analysis with instrument-response
//! deconvolution.
//!
//! Ideal models (antibunching dip `g2(tau) = 1 - p*exp(-|tau|/tau1)`,
//! single-exponential decay) are convolved with a skew-normal instrument
//! response and fitted to measured coincidence histograms. The convolution
//! is discrete on the measurement grid with internal oversampling of the
//! kernel, so the kink of the ideal models is resolved well below the bin
//! width.

use crate::fit::{self, FitError, FitOptions, FitResult, ParamSpec};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimeDomainError {
    #[error("histogram bins must be uniform within 1e-9 ns (index {index}: step {step})")]
    NonUniformBins { index: usize, step: f64 },
    #[error("histogram counts must be non-negative (index {0})")]
    NegativeCounts(usize),
    #[error("bin width must be positive (got {0})")]
    BadBinWidth(f64),
    #[error("histogram needs at least {need} bins (got {got})")]
    TooFewBins { need: usize, got: usize },
    #[error("irf scale must be positive (got {0})")]
    BadIrfScale(f64),
    #[error(
        "grid span {span_ns:.3} ns is too short for the instrument response; \
         need at least {required_ns:.3} ns"
    )]
    InsufficientPadding { span_ns: f64, required_ns: f64 },
    #[error("histogram has no significant pulse above the baseline")]
    FlatHistogram,
    #[error("histogram is multi-modal ({peaks} pulse clusters); select a window around one pulse")]
    MultiModal { peaks: usize },
    #[error("tail window [{0}, {1}] ns selects no bins")]
    EmptyTailWindow(f64, f64),
    #[error(
        "tail window starts at {start_ns} ns but must lie beyond 10 * tau1 prior = {min_ns} ns"
    )]
    TailOverlapsDip { start_ns: f64, min_ns: f64 },
    #[error("tail window holds {got} bins, need at least {need}")]
    TailTooNarrow { got: usize, need: usize },
    #[error("histogram covers {covered_ns:.2} ns after the pulse; need >= {required_ns:.2} ns")]
    TailTooShort { covered_ns: f64, required_ns: f64 },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Time-binned coincidence counts on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    bin_centers_ns: Vec<f64>,
    counts: Vec<f64>,
    bin_width_ns: f64,
}

impl CorrelationHistogram {
    pub fn new(bin_centers_ns: Vec<f64>, counts: Vec<f64>) -> Result<Self, TimeDomainError> {
        if bin_centers_ns.len() < 2 {
            return Err(TimeDomainError::TooFewBins {
                need: 2,
                got: bin_centers_ns.len(),
            });
        }
        assert_eq!(bin_centers_ns.len(), counts.len());
        let width = bin_centers_ns[1] - bin_centers_ns[0];
        if width <= 0.0 {
            return Err(TimeDomainError::BadBinWidth(width));
        }
        for (i, w) in bin_centers_ns.windows(2).enumerate() {
            let step = w[1] - w[0];
            if (step - width).abs() > 1e-9 {
                return Err(TimeDomainError::NonUniformBins { index: i + 1, step });
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            if !(c.is_finite() && c >= 0.0) {
                return Err(TimeDomainError::NegativeCounts(i));
            }
        }
        Ok(Self {
            bin_centers_ns,
            counts,
            bin_width_ns: width,
        })
    }

    /// Uniform histogram from a start time and bin width.
    pub fn from_start(
        start_ns: f64,
        bin_width_ns: f64,
        counts: Vec<f64>,
    ) -> Result<Self, TimeDomainError> {
        let centers = (0..counts.len())
            .map(|i| start_ns + i as f64 * bin_width_ns)
            .collect();
        Self::new(centers, counts)
    }

    pub fn bin_centers_ns(&self) -> &[f64] {
        &self.bin_centers_ns
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn bin_width_ns(&self) -> f64 {
        self.bin_width_ns
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            start_ns: self.bin_centers_ns[0],
            step_ns: self.bin_width_ns,
            n: self.len(),
        }
    }
}

/// Skew-normal instrument response: location, scale, and shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrfModel {
    pub location_ns: f64,
    pub scale_ns: f64,
    pub shape: f64,
}

impl IrfModel {
    pub fn new(location_ns: f64, scale_ns: f64, shape: f64) -> Result<Self, TimeDomainError> {
        if !(scale_ns.is_finite() && scale_ns > 0.0) {
            return Err(TimeDomainError::BadIrfScale(scale_ns));
        }
        Ok(Self {
            location_ns,
            scale_ns,
            shape,
        })
    }
}

/// Uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start_ns: f64,
    pub step_ns: f64,
    pub n: usize,
}

impl TimeGrid {
    pub fn points(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.start_ns + i as f64 * self.step_ns)
            .collect()
    }

    pub fn span_ns(&self) -> f64 {
        (self.n.saturating_sub(1)) as f64 * self.step_ns
    }
}

/// Ideal antibunching dip `1 - p * exp(-|tau| / tau1)`.
#[inline]
pub fn g2_ideal(tau_ns: f64, p: f64, tau1_ns: f64) -> f64 {
    1.0 - p * (-tau_ns.abs() / tau1_ns).exp()
}

/// One-sided exponential pulse `step(u) * exp(-u/tau)` averaged against a
/// unit-mass triangle of half-width `tap_width` centered at `x`.
///
/// The triangle average is what one kernel tap of that spacing resolves;
/// unlike the raw step model the result is C1 in the onset time, so least
/// squares over a sampled convolution has neither staircase value jumps nor
/// derivative jumps in t0, even for a near-delta response. `tap_width <= 0`
/// returns the plain step model.
#[inline]
pub fn decay_pulse(x_ns: f64, tau_ns: f64, tap_width_ns: f64) -> f64 {
    let (x, tau, h) = (x_ns, tau_ns, tap_width_ns);
    if h <= 0.0 {
        return if x >= 0.0 { (-x / tau).exp() } else { 0.0 };
    }
    if x + h <= 0.0 {
        return 0.0;
    }
    let i0 = |p: f64, q: f64| tau * ((-p / tau).exp() - (-q / tau).exp());
    let i1 = |p: f64, q: f64| tau * ((p + tau) * (-p / tau).exp() - (q + tau) * (-q / tau).exp());
    let mut acc = 0.0;
    // Rising flank of the triangle over [x-h, x], clipped to u >= 0.
    let a = (x - h).max(0.0);
    let b = x.max(a);
    if b > a {
        acc += i1(a, b) - (x - h) * i0(a, b);
    }
    // Falling flank over [x, x+h], clipped to u >= 0.
    let c = x.max(0.0);
    let d = (x + h).max(c);
    if d > c {
        acc += (x + h) * i0(c, d) - i1(c, d);
    }
    acc / (h * h)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Skew-normal density `(2/w) * phi(z) * Phi(shape * z)` with `z = (t - loc)/w`.
#[inline]
pub fn skew_gaussian_density(t_ns: f64, irf: &IrfModel) -> f64 {
    let z = (t_ns - irf.location_ns) / irf.scale_ns;
    2.0 / irf.scale_ns * std_normal_pdf(z) * std_normal_cdf(irf.shape * z)
}

/// Kernel truncation threshold relative to the density peak.
const KERNEL_TRUNCATION: f64 = 1e-6;
/// Default internal oversampling of the kernel relative to the grid step.
pub const DEFAULT_OVERSAMPLE: usize = 10;

/// Sampled, truncated, unit-sum IRF kernel.
struct Kernel {
    offsets_ns: Vec<f64>,
    weights: Vec<f64>,
}

fn build_kernel(irf: &IrfModel, fine_step_ns: f64) -> Kernel {
    // A response narrower than one tap is below the sampling resolution:
    // treat it as a delta at its location.
    if 6.0 * irf.scale_ns <= fine_step_ns {
        return Kernel {
            offsets_ns: vec![irf.location_ns],
            weights: vec![1.0],
        };
    }
    // Sample generously around the location with at least two taps per
    // scale; the skew-normal mode lies within about one scale of the
    // location for any shape. Midpoint sampling keeps the quadrature
    // second-order even when the convolved model has a jump.
    let fine_step_ns = fine_step_ns.min(0.5 * irf.scale_ns);
    let reach = 10.0 * irf.scale_ns;
    let n = (2.0 * reach / fine_step_ns).ceil() as usize + 1;
    let start = irf.location_ns - reach;
    let mut offsets: Vec<f64> = (0..n)
        .map(|i| start + (i as f64 + 0.5) * fine_step_ns)
        .collect();
    let mut weights: Vec<f64> = offsets
        .iter()
        .map(|&t| skew_gaussian_density(t, irf))
        .collect();

    let peak = weights.iter().cloned().fold(0.0_f64, f64::max);
    let cut = KERNEL_TRUNCATION * peak;
    let first = weights.iter().position(|&w| w >= cut).unwrap_or(0);
    let last = weights.iter().rposition(|&w| w >= cut).unwrap_or(n - 1);
    offsets.drain(..first);
    offsets.truncate(last + 1 - first);
    weights.drain(..first);
    weights.truncate(last + 1 - first);

    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Kernel {
        offsets_ns: offsets,
        weights,
    }
}

/// Convolve an analytic time-domain model with the instrument response,
/// sampled at the grid points.
///
/// The kernel is sampled at `step / oversample`, truncated where its density
/// falls below 1e-6 of the peak, and renormalized to unit discrete sum, so a
/// constant model convolves to the same constant. The model closure is
/// evaluated directly wherever the kernel reaches, including beyond the
/// output grid.
pub fn convolve_with_irf(
    model: impl Fn(f64) -> f64,
    irf: &IrfModel,
    grid: &TimeGrid,
    oversample: usize,
) -> Result<Vec<f64>, TimeDomainError> {
    assert!(oversample >= 1);
    let required = 6.0 * irf.scale_ns;
    if grid.span_ns() < required {
        return Err(TimeDomainError::InsufficientPadding {
            span_ns: grid.span_ns(),
            required_ns: required,
        });
    }
    let fine = grid.step_ns / oversample as f64;
    let kernel = build_kernel(irf, fine);
    let mut out = Vec::with_capacity(grid.n);
    for i in 0..grid.n {
        let t = grid.start_ns + i as f64 * grid.step_ns;
        let mut acc = 0.0;
        for (&s, &w) in kernel.offsets_ns.iter().zip(&kernel.weights) {
            acc += w * model(t - s);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Result of fitting the instrument response to a laser-pulse histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrfFit {
    pub model: IrfModel,
    pub location_sigma_ns: f64,
    pub scale_sigma_ns: f64,
    pub shape_sigma: f64,
    pub amplitude: f64,
    pub fit: FitResult,
}

/// Fit `amplitude * skew_gaussian_density` to a measured laser pulse.
pub fn fit_irf(hist: &CorrelationHistogram) -> Result<IrfFit, TimeDomainError> {
    let counts = hist.counts();
    let t = hist.bin_centers_ns();
    let n = counts.len();

    let max = counts.iter().cloned().fold(0.0_f64, f64::max);
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let baseline = sorted[n / 2];
    if max - baseline <= 5.0 * (baseline + 1.0).sqrt() {
        return Err(TimeDomainError::FlatHistogram);
    }

    // Cluster bins above half height; more than one cluster means the
    // histogram holds several pulses.
    let threshold = baseline + 0.5 * (max - baseline);
    let mut clusters = 0usize;
    let mut gap = usize::MAX;
    for &c in counts {
        if c > threshold {
            if gap > 3 {
                clusters += 1;
            }
            gap = 0;
        } else {
            gap = gap.saturating_add(1);
        }
    }
    if clusters > 1 {
        return Err(TimeDomainError::MultiModal { peaks: clusters });
    }

    // Method-of-moments seeds from background-subtracted counts.
    let mut w_sum = 0.0;
    let mut mean = 0.0;
    for (&ti, &c) in t.iter().zip(counts) {
        let w = (c - baseline).max(0.0);
        w_sum += w;
        mean += w * ti;
    }
    mean /= w_sum;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for (&ti, &c) in t.iter().zip(counts) {
        let w = (c - baseline).max(0.0);
        let d = ti - mean;
        m2 += w * d * d;
        m3 += w * d * d * d;
    }
    m2 /= w_sum;
    m3 /= w_sum;
    let skewness = (m3 / m2.powf(1.5)).clamp(-0.9, 0.9);
    let b = (2.0 / std::f64::consts::PI).sqrt();
    let g23 = skewness.abs().powf(2.0 / 3.0);
    let denom = g23 + ((4.0 - std::f64::consts::PI) / 2.0).powf(2.0 / 3.0);
    let delta = (skewness.signum() * (g23 / denom).sqrt() / b).clamp(-0.99, 0.99);
    let omega0 = (m2 / (1.0 - b * b * delta * delta)).sqrt();
    let xi0 = mean - omega0 * delta * b;
    let alpha0 = delta / (1.0 - delta * delta).sqrt();
    let amp0 = w_sum * hist.bin_width_ns();

    let specs = vec![
        ParamSpec::bounded("amplitude", amp0.max(1.0), 0.0, f64::INFINITY),
        ParamSpec::free("location", xi0),
        ParamSpec::bounded("scale", omega0.max(hist.bin_width_ns() * 0.2), 1e-4, 1e4),
        ParamSpec::bounded("shape", alpha0, -30.0, 30.0),
    ];
    let model = |p: &[f64], x: &[f64], out: &mut [f64]| {
        let irf = IrfModel {
            location_ns: p[1],
            scale_ns: p[2],
            shape: p[3],
        };
        for (o, &ti) in out.iter_mut().zip(x) {
            *o = p[0] * skew_gaussian_density(ti, &irf);
        }
    };
    let fit = fit::least_squares(model, t, counts, None, &specs, &FitOptions::default())?;
    let model = IrfModel {
        location_ns: fit.value("location").unwrap(),
        scale_ns: fit.value("scale").unwrap(),
        shape: fit.value("shape").unwrap(),
    };
    Ok(IrfFit {
        model,
        location_sigma_ns: fit.sigma("location").unwrap(),
        scale_sigma_ns: fit.sigma("scale").unwrap(),
        shape_sigma: fit.sigma("shape").unwrap(),
        amplitude: fit.value("amplitude").unwrap(),
        fit,
    })
}

/// Histogram divided by its long-delay mean, with per-bin uncertainties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedG2 {
    pub tau_ns: Vec<f64>,
    pub value: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Counts corresponding to `g2 = 1` (the tail mean).
    pub scale: f64,
    pub bin_width_ns: f64,
}

/// Minimum number of bins the tail window must hold.
const MIN_TAIL_BINS: usize = 20;

/// Normalize a coincidence histogram to its long-delay plateau.
///
/// `tail_window` selects bins with `|tau|` inside the interval; it must hold
/// at least 20 bins and start beyond `10 * tau1_prior_ns` so it cannot
/// overlap the dip.
pub fn normalize_g2(
    hist: &CorrelationHistogram,
    tail_window: (f64, f64),
    tau1_prior_ns: f64,
) -> Result<NormalizedG2, TimeDomainError> {
    let (lo, hi) = tail_window;
    let min_start = 10.0 * tau1_prior_ns;
    if lo < min_start {
        return Err(TimeDomainError::TailOverlapsDip {
            start_ns: lo,
            min_ns: min_start,
        });
    }
    let tail: Vec<f64> = hist
        .bin_centers_ns()
        .iter()
        .zip(hist.counts())
        .filter(|(&t, _)| t.abs() >= lo && t.abs() <= hi)
        .map(|(_, &c)| c)
        .collect();
    if tail.is_empty() {
        return Err(TimeDomainError::EmptyTailWindow(lo, hi));
    }
    if tail.len() < MIN_TAIL_BINS {
        return Err(TimeDomainError::TailTooNarrow {
            got: tail.len(),
            need: MIN_TAIL_BINS,
        });
    }
    let scale = tail.iter().sum::<f64>() / tail.len() as f64;
    let value: Vec<f64> = hist.counts().iter().map(|&c| c / scale).collect();
    let sigma: Vec<f64> = hist
        .counts()
        .iter()
        .map(|&c| c.max(1.0).sqrt() / scale)
        .collect();
    Ok(NormalizedG2 {
        tau_ns: hist.bin_centers_ns().to_vec(),
        value,
        sigma,
        scale,
        bin_width_ns: hist.bin_width_ns(),
    })
}

/// Configuration for the antibunching fit.
#[derive(Debug, Clone)]
pub struct G2FitConfig {
    /// Only bins with `|tau| <= fit_window_ns` enter the fit.
    pub fit_window_ns: f64,
    /// Whether the time offset t0 is a free parameter.
    pub fit_t0: bool,
    pub oversample: usize,
    pub tau1_seed_ns: f64,
    pub options: FitOptions,
}

impl Default for G2FitConfig {
    fn default() -> Self {
        Self {
            fit_window_ns: 30.0,
            fit_t0: true,
            oversample: DEFAULT_OVERSAMPLE,
            tau1_seed_ns: 2.0,
            options: FitOptions::default(),
        }
    }
}

/// Antibunching fit outcome; `g2_zero = 1 - p` with its propagated sigma.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct G2FitResult {
    pub p: f64,
    pub tau1_ns: f64,
    pub t0_ns: f64,
    pub g2_zero: f64,
    pub p_sigma: f64,
    pub tau1_sigma_ns: f64,
    pub t0_sigma_ns: f64,
    pub g2_zero_sigma: f64,
    pub fit: FitResult,
}

/// Fit the convolved antibunching model to a normalized histogram.
pub fn fit_g2(
    norm: &NormalizedG2,
    irf: &IrfModel,
    cfg: &G2FitConfig,
) -> Result<G2FitResult, TimeDomainError> {
    let mut tau = Vec::new();
    let mut val = Vec::new();
    let mut sig = Vec::new();
    for ((&t, &v), &s) in norm.tau_ns.iter().zip(&norm.value).zip(&norm.sigma) {
        if t.abs() <= cfg.fit_window_ns {
            tau.push(t);
            val.push(v);
            sig.push(s);
        }
    }
    if tau.len() < 8 {
        return Err(TimeDomainError::TooFewBins {
            need: 8,
            got: tau.len(),
        });
    }
    let grid = TimeGrid {
        start_ns: tau[0],
        step_ns: norm.bin_width_ns,
        n: tau.len(),
    };

    // Seed the dip depth from the minimum of the data.
    let min = val.iter().cloned().fold(f64::INFINITY, f64::min);
    let p0 = (1.0 - min).clamp(0.05, 0.95);
    let reach = 0.25 * (tau[tau.len() - 1] - tau[0]);
    let t0_seed = if cfg.fit_t0 {
        let idx = val
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        (tau[idx] - irf.location_ns).clamp(-0.9 * reach, 0.9 * reach)
    } else {
        0.0
    };

    let specs = |free_t0: bool| {
        vec![
            ParamSpec::bounded("p", p0, 0.0, 1.0),
            ParamSpec::bounded("tau1", cfg.tau1_seed_ns, 1e-3, 1e3),
            if free_t0 {
                ParamSpec::bounded("t0", t0_seed, -reach, reach)
            } else {
                ParamSpec::fixed("t0", t0_seed)
            },
        ]
    };

    let irf = *irf;
    let oversample = cfg.oversample;
    let model = move |p: &[f64], _x: &[f64], out: &mut [f64]| {
        let (depth, tau1, t0) = (p[0], p[1], p[2]);
        let ideal = |t: f64| g2_ideal(t - t0, depth, tau1);
        match convolve_with_irf(ideal, &irf, &grid, oversample) {
            Ok(v) => out.copy_from_slice(&v),
            Err(_) => out.fill(f64::NAN),
        }
    };
    // Without a dip the offset is unconstrained (its gradient scales with
    // p); if that degeneracy surfaces, refit with the offset pinned.
    let fit = match fit::least_squares(&model, &tau, &val, Some(&sig), &specs(cfg.fit_t0), &cfg.options)
    {
        Err(FitError::Singular(a, b)) if cfg.fit_t0 && (a == "t0" || b == "t0") => {
            fit::least_squares(&model, &tau, &val, Some(&sig), &specs(false), &cfg.options)?
        }
        other => other?,
    };

    let p = fit.value("p").unwrap();
    let p_sigma = fit.sigma("p").unwrap();
    Ok(G2FitResult {
        p,
        tau1_ns: fit.value("tau1").unwrap(),
        t0_ns: fit.value("t0").unwrap(),
        g2_zero: 1.0 - p,
        p_sigma,
        tau1_sigma_ns: fit.sigma("tau1").unwrap(),
        t0_sigma_ns: fit.sigma("t0").unwrap(),
        g2_zero_sigma: p_sigma,
        fit,
    })
}

/// Configuration for the lifetime fit.
#[derive(Debug, Clone)]
pub struct LifetimeFitConfig {
    pub oversample: usize,
    /// Required histogram coverage after the pulse, in units of tau1.
    pub min_tail_tau: f64,
    pub options: FitOptions,
}

impl Default for LifetimeFitConfig {
    fn default() -> Self {
        Self {
            oversample: DEFAULT_OVERSAMPLE,
            min_tail_tau: 5.0,
            options: FitOptions::default(),
        }
    }
}

/// Lifetime fit outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LifetimeFitResult {
    pub tau1_ns: f64,
    pub tau1_sigma_ns: f64,
    pub t0_ns: f64,
    pub amplitude: f64,
    pub baseline: f64,
    pub fit: FitResult,
}

/// Fit `A * step(t - t0) * exp(-(t - t0)/tau1) + baseline`, convolved with
/// the instrument response, to a decay histogram.
pub fn fit_lifetime(
    hist: &CorrelationHistogram,
    irf: &IrfModel,
    cfg: &LifetimeFitConfig,
) -> Result<LifetimeFitResult, TimeDomainError> {
    let t = hist.bin_centers_ns();
    let counts = hist.counts();
    let n = counts.len();

    let peak_idx = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let peak = counts[peak_idx];
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let baseline0 = sorted[n / 4];
    if peak - baseline0 <= 5.0 * (baseline0 + 1.0).sqrt() {
        return Err(TimeDomainError::FlatHistogram);
    }

    // Log-slope seed for tau1 from the upper decay flank.
    let hi = baseline0 + 0.8 * (peak - baseline0);
    let lo = baseline0 + 0.05 * (peak - baseline0);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut k = 0.0;
    for j in peak_idx..n {
        let c = counts[j];
        if c < hi && c > lo {
            let ln = (c - baseline0).max(0.5).ln();
            sx += t[j];
            sy += ln;
            sxx += t[j] * t[j];
            sxy += t[j] * ln;
            k += 1.0;
        }
    }
    let tau1_seed = if k >= 3.0 {
        let slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
        if slope < -1e-6 {
            (-1.0 / slope).clamp(1e-3, 1e3)
        } else {
            2.0
        }
    } else {
        2.0
    };

    let covered = t[n - 1] - t[peak_idx];
    let required = cfg.min_tail_tau * tau1_seed;
    if covered < required {
        return Err(TimeDomainError::TailTooShort {
            covered_ns: covered,
            required_ns: required,
        });
    }

    // Seed the onset from the half-rise bin: with a narrow response the
    // gradient in t0 only reaches one or two bins, so the seed must land
    // on the rising edge rather than past the peak.
    let half_rise = baseline0 + 0.5 * (peak - baseline0);
    let rise_idx = (0..=peak_idx)
        .find(|&j| counts[j] >= half_rise)
        .unwrap_or(peak_idx);
    let t0_seed = t[rise_idx] - irf.location_ns - 0.5 * irf.scale_ns;
    let specs = vec![
        ParamSpec::bounded("amplitude", (peak - baseline0).max(1.0), 0.0, f64::INFINITY),
        ParamSpec::bounded("tau1", tau1_seed, 1e-3, 1e3),
        ParamSpec::bounded("t0", t0_seed, t[0] - 5.0, t[n - 1]),
        ParamSpec::bounded("baseline", baseline0.max(0.0), 0.0, f64::INFINITY),
    ];
    let grid = hist.grid();
    let irf = *irf;
    let oversample = cfg.oversample;
    let tap_width = grid.step_ns / oversample as f64;
    let model = move |p: &[f64], _x: &[f64], out: &mut [f64]| {
        let (amp, tau1, t0, base) = (p[0], p[1], p[2], p[3]);
        let ideal = move |ti: f64| amp * decay_pulse(ti - t0, tau1, tap_width);
        match convolve_with_irf(ideal, &irf, &grid, oversample) {
            Ok(v) => {
                for (o, m) in out.iter_mut().zip(v) {
                    *o = m + base;
                }
            }
            Err(_) => out.fill(f64::NAN),
        }
    };
    let fit = fit::least_squares(model, t, counts, None, &specs, &cfg.options)?;
    Ok(LifetimeFitResult {
        tau1_ns: fit.value("tau1").unwrap(),
        tau1_sigma_ns: fit.sigma("tau1").unwrap(),
        t0_ns: fit.value("t0").unwrap(),
        amplitude: fit.value("amplitude").unwrap(),
        baseline: fit.value("baseline").unwrap(),
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn g2_ideal_examples() {
        assert_relative_eq!(g2_ideal(0.0, 0.73, 1.954), 0.27, epsilon = 1e-12);
        assert!((g2_ideal(40.0, 0.73, 1.954) - 1.0).abs() < 1e-8);
        let tau = 1.954 * std::f64::consts::LN_2;
        assert_relative_eq!(g2_ideal(tau, 0.73, 1.954), 0.635, epsilon = 1e-12);
    }

    #[test]
    fn skew_density_gaussian_case() {
        let irf = IrfModel::new(1.0, 0.5, 0.0).unwrap();
        let expected = 1.0 / (0.5 * (2.0 * std::f64::consts::PI).sqrt());
        assert_relative_eq!(
            skew_gaussian_density(1.0, &irf),
            expected,
            max_relative = 1e-12
        );
        // Symmetric about the location for zero shape.
        assert_relative_eq!(
            skew_gaussian_density(1.3, &irf),
            skew_gaussian_density(0.7, &irf),
            max_relative = 1e-12
        );
    }

    #[test]
    fn skew_density_integrates_to_one() {
        for shape in [-4.0, 0.0, 2.5] {
            let irf = IrfModel::new(0.3, 0.7, shape).unwrap();
            let q = crate::quad::adaptive(
                |t| skew_gaussian_density(t, &irf),
                0.3 - 30.0,
                0.3 + 30.0,
                1e-9,
                0.0,
            )
            .unwrap();
            assert!((q.value - 1.0).abs() < 1e-6, "shape {shape}: {}", q.value);
        }
    }

    #[test]
    fn skew_density_third_moment_sign() {
        for shape in [-3.0, 3.0] {
            let irf = IrfModel::new(0.0, 1.0, shape).unwrap();
            let mean = crate::quad::adaptive(
                |t| t * skew_gaussian_density(t, &irf),
                -40.0,
                40.0,
                1e-10,
                0.0,
            )
            .unwrap()
            .value;
            let m3 = crate::quad::adaptive(
                |t| (t - mean).powi(3) * skew_gaussian_density(t, &irf),
                -40.0,
                40.0,
                1e-10,
                0.0,
            )
            .unwrap()
            .value;
            assert_eq!(m3.signum(), shape.signum(), "shape {shape} gave m3 {m3}");
        }
    }

    #[test]
    fn near_delta_kernel_is_identity() {
        let grid = TimeGrid {
            start_ns: -10.0,
            step_ns: 0.1,
            n: 201,
        };
        let irf = IrfModel::new(0.0, 0.001, 0.0).unwrap();
        let model = |t: f64| g2_ideal(t, 0.73, 1.954);
        let out = convolve_with_irf(model, &irf, &grid, 10).unwrap();
        for (i, &v) in out.iter().enumerate() {
            let t = grid.start_ns + i as f64 * grid.step_ns;
            assert_relative_eq!(v, model(t), max_relative = 1e-3);
        }
    }

    #[test]
    fn convolving_constant_preserves_it() {
        let grid = TimeGrid {
            start_ns: -20.0,
            step_ns: 0.1,
            n: 401,
        };
        let irf = IrfModel::new(0.2, 0.5, 3.0).unwrap();
        let out = convolve_with_irf(|_| 1.0, &irf, &grid, 10).unwrap();
        for &v in &out {
            assert_relative_eq!(v, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn insufficient_padding_is_reported() {
        let grid = TimeGrid {
            start_ns: 0.0,
            step_ns: 0.1,
            n: 11,
        };
        let irf = IrfModel::new(0.0, 0.5, 0.0).unwrap();
        let err = convolve_with_irf(|_| 1.0, &irf, &grid, 10).unwrap_err();
        match err {
            TimeDomainError::InsufficientPadding { required_ns, .. } => {
                assert_relative_eq!(required_ns, 3.0, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn convolved_dip_is_shallower_and_centered() {
        let grid = TimeGrid {
            start_ns: -20.0,
            step_ns: 0.1,
            n: 401,
        };
        let irf = IrfModel::new(0.0, 0.5, 0.0).unwrap();
        let out = convolve_with_irf(|t| g2_ideal(t, 0.73, 1.954), &irf, &grid, 10).unwrap();
        let (imin, &vmin) = out
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert!(vmin > 0.27, "jitter must lift the dip: {vmin}");
        let tmin = grid.start_ns + imin as f64 * grid.step_ns;
        assert!(tmin.abs() <= grid.step_ns + 1e-9, "dip at {tmin}");
    }

    #[test]
    fn normalize_guards() {
        let counts = vec![100.0; 2001];
        let hist = CorrelationHistogram::from_start(-100.0, 0.1, counts).unwrap();
        let err = normalize_g2(&hist, (5.0, 8.0), 2.0).unwrap_err();
        assert!(matches!(err, TimeDomainError::TailOverlapsDip { .. }));
        let err = normalize_g2(&hist, (150.0, 200.0), 2.0).unwrap_err();
        assert!(matches!(err, TimeDomainError::EmptyTailWindow(_, _)));
        let norm = normalize_g2(&hist, (50.0, 100.0), 2.0).unwrap();
        assert_relative_eq!(norm.scale, 100.0, epsilon = 1e-9);
        let tail_mean: f64 = norm
            .tau_ns
            .iter()
            .zip(&norm.value)
            .filter(|(&t, _)| t.abs() >= 50.0)
            .map(|(_, &v)| v)
            .sum::<f64>()
            / norm
                .tau_ns
                .iter()
                .filter(|t| t.abs() >= 50.0)
                .count() as f64;
        assert_relative_eq!(tail_mean, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn histogram_rejects_non_uniform_grid() {
        let err = CorrelationHistogram::new(vec![0.0, 0.1, 0.25], vec![1.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, TimeDomainError::NonUniformBins { .. }));
    }

    #[test]
    fn flat_histogram_rejected_by_irf_fit() {
        let hist = CorrelationHistogram::from_start(0.0, 0.1, vec![50.0; 200]).unwrap();
        assert!(matches!(
            fit_irf(&hist),
            Err(TimeDomainError::FlatHistogram)
        ));
    }

    #[test]
    fn multimodal_histogram_rejected_by_irf_fit() {
        let mut counts = vec![2.0; 400];
        let irf = IrfModel::new(10.0, 0.5, 2.0).unwrap();
        for (i, c) in counts.iter_mut().enumerate() {
            let t = i as f64 * 0.1;
            *c += 5000.0 * 0.1 * skew_gaussian_density(t, &irf)
                + 5000.0 * 0.1 * skew_gaussian_density(t - 20.0, &irf);
        }
        let hist = CorrelationHistogram::from_start(0.0, 0.1, counts).unwrap();
        assert!(matches!(
            fit_irf(&hist),
            Err(TimeDomainError::MultiModal { .. })
        ));
    }
}
