//! Energy-resolved photon-count data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectrumError {
    #[error("energy axis must be strictly increasing (violated at index {0})")]
    NonIncreasingEnergy(usize),
    #[error("counts must be non-negative (index {index}: {value})")]
    NegativeCounts { index: usize, value: f64 },
    #[error("length mismatch: {energies} energies vs {counts} counts")]
    LengthMismatch { energies: usize, counts: usize },
    #[error("sigma length {sigma} does not match {points} data points")]
    SigmaLengthMismatch { sigma: usize, points: usize },
    #[error("sigma must be finite and positive (index {0})")]
    InvalidSigma(usize),
    #[error("spectrum must contain at least one point")]
    Empty,
    #[error("all values must be finite (index {0})")]
    NonFinite(usize),
}

/// Energy-resolved photon counts with optional per-point uncertainty.
///
/// Energies are in eV and strictly increasing; counts are non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    energies_ev: Vec<f64>,
    counts: Vec<f64>,
    sigma: Option<Vec<f64>>,
}

impl Spectrum {
    pub fn new(
        energies_ev: Vec<f64>,
        counts: Vec<f64>,
        sigma: Option<Vec<f64>>,
    ) -> Result<Self, SpectrumError> {
        if energies_ev.is_empty() {
            return Err(SpectrumError::Empty);
        }
        if energies_ev.len() != counts.len() {
            return Err(SpectrumError::LengthMismatch {
                energies: energies_ev.len(),
                counts: counts.len(),
            });
        }
        for (i, &e) in energies_ev.iter().enumerate() {
            if !e.is_finite() {
                return Err(SpectrumError::NonFinite(i));
            }
            if i > 0 && e <= energies_ev[i - 1] {
                return Err(SpectrumError::NonIncreasingEnergy(i));
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            if !c.is_finite() {
                return Err(SpectrumError::NonFinite(i));
            }
            if c < 0.0 {
                return Err(SpectrumError::NegativeCounts { index: i, value: c });
            }
        }
        if let Some(s) = &sigma {
            if s.len() != counts.len() {
                return Err(SpectrumError::SigmaLengthMismatch {
                    sigma: s.len(),
                    points: counts.len(),
                });
            }
            for (i, &v) in s.iter().enumerate() {
                if !v.is_finite() || v <= 0.0 {
                    return Err(SpectrumError::InvalidSigma(i));
                }
            }
        }
        Ok(Self {
            energies_ev,
            counts,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.energies_ev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies_ev.is_empty()
    }

    pub fn energies_ev(&self) -> &[f64] {
        &self.energies_ev
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    /// Index of the point with the highest counts among those accepted by `mask`.
    pub fn argmax_where(&self, mask: impl Fn(f64) -> bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (&e, &c)) in self.energies_ev.iter().zip(&self.counts).enumerate() {
            if mask(e) && best.map_or(true, |(_, bc)| c > bc) {
                best = Some((i, c));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Uniform energy grid used by the synthetic generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyGrid {
    pub start_ev: f64,
    pub step_ev: f64,
    pub n: usize,
}

impl EnergyGrid {
    pub fn new(start_ev: f64, step_ev: f64, n: usize) -> Self {
        assert!(step_ev > 0.0 && n > 0, "grid requires step > 0 and n > 0");
        Self {
            start_ev,
            step_ev,
            n,
        }
    }

    /// Grid covering `[lo, hi]` with the given step.
    pub fn span(lo_ev: f64, hi_ev: f64, step_ev: f64) -> Self {
        let n = ((hi_ev - lo_ev) / step_ev).floor() as usize + 1;
        Self::new(lo_ev, step_ev, n)
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.start_ev + i as f64 * self.step_ev)
            .collect()
    }

    pub fn end_ev(&self) -> f64 {
        self.start_ev + (self.n - 1) as f64 * self.step_ev
    }
}
