//! Adaptive Gauss–Kronrod quadrature.
//!
//! A 7/15-point Gauss–Kronrod pair drives globally adaptive bisection: the
//! interval with the largest error estimate is split until the summed error
//! meets the requested tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error(
        "quadrature did not converge after {intervals} intervals \
         (value {value:.6e}, error estimate {error:.3e})"
    )]
    NonConvergence {
        value: f64,
        error: f64,
        intervals: usize,
    },
    #[error("integration bounds must be finite with a < b")]
    BadInterval,
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub abs_error: f64,
    pub n_intervals: usize,
}

// 15-point Kronrod nodes (positive half; the Gauss-7 nodes sit at odd indices).
const XGK: [f64; 7] = [
    0.991_455_371_120_813,
    0.949_107_912_342_759,
    0.864_864_423_359_769,
    0.741_531_185_599_394,
    0.586_087_235_467_691,
    0.405_845_151_377_397,
    0.207_784_955_007_898,
];
const WGK: [f64; 7] = [
    0.022_935_322_010_529,
    0.063_092_092_629_979,
    0.104_790_010_322_250,
    0.140_653_259_715_525,
    0.169_004_726_639_267,
    0.190_350_578_064_785,
    0.204_432_940_075_298,
];
const WGK_CENTER: f64 = 0.209_482_141_084_728;
const WG: [f64; 3] = [
    0.129_484_966_168_870,
    0.279_705_391_489_277,
    0.381_830_050_505_119,
];
const WG_CENTER: f64 = 0.417_959_183_673_469;

const MAX_INTERVALS: usize = 4096;

fn rescale_error(err: f64, res_abs: f64, res_asc: f64) -> f64 {
    let mut scaled = err.abs();
    if res_asc != 0.0 && scaled != 0.0 {
        let scale = (200.0 * scaled / res_asc).powf(1.5);
        scaled = if scale < 1.0 { res_asc * scale } else { res_asc };
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        scaled = scaled.max(50.0 * f64::EPSILON * res_abs);
    }
    scaled
}

/// One 15-point Gauss–Kronrod evaluation over `[a, b]`.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);

    let mut kronrod = fc * WGK_CENTER;
    let mut gauss = fc * WG_CENTER;
    let mut res_abs = fc.abs() * WGK_CENTER;
    let mut fv = [0.0_f64; 14];

    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let dx = half * x;
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv[2 * j] = f1;
        fv[2 * j + 1] = f2;
        kronrod += w * (f1 + f2);
        res_abs += w * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }

    let mean = kronrod * 0.5;
    let mut res_asc = WGK_CENTER * (fc - mean).abs();
    for (j, w) in WGK.iter().enumerate() {
        res_asc += w * ((fv[2 * j] - mean).abs() + (fv[2 * j + 1] - mean).abs());
    }

    let value = kronrod * half;
    let err = rescale_error((kronrod - gauss) * half, res_abs * half.abs(), res_asc * half.abs());
    (value, err)
}

#[derive(Debug)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .partial_cmp(&other.error)
            .unwrap_or(Ordering::Equal)
    }
}

/// Adaptively integrate `f` over `[a, b]` until the absolute error estimate
/// drops below `max(abs_tol, rel_tol * |value|)`.
pub fn adaptive(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Quadrature, QuadError> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(QuadError::BadInterval);
    }

    let (v, e) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment {
        a,
        b,
        value: v,
        error: e,
    });
    let mut total_value = v;
    let mut total_error = e;

    loop {
        if !total_value.is_finite() || !total_error.is_finite() {
            return Err(QuadError::NonConvergence {
                value: total_value,
                error: total_error,
                intervals: heap.len(),
            });
        }
        let tol = abs_tol.max(rel_tol * total_value.abs());
        if total_error <= tol {
            return Ok(Quadrature {
                value: total_value,
                abs_error: total_error,
                n_intervals: heap.len(),
            });
        }
        if heap.len() >= MAX_INTERVALS {
            return Err(QuadError::NonConvergence {
                value: total_value,
                error: total_error,
                intervals: heap.len(),
            });
        }
        let worst = heap.pop().expect("heap cannot be empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval narrowed to machine precision; its error cannot shrink further.
            return Err(QuadError::NonConvergence {
                value: total_value,
                error: total_error,
                intervals: heap.len() + 1,
            });
        }
        let (v1, e1) = gk15(&f, worst.a, mid);
        let (v2, e2) = gk15(&f, mid, worst.b);
        total_value += v1 + v2 - worst.value;
        total_error += e1 + e2 - worst.error;
        heap.push(Segment {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
    }
}

/// Integrate `f` over the whole real line via the substitution
/// `x = center + scale * tan(theta)`.
///
/// `scale` should match the width of the dominant feature; for a Lorentzian
/// with half-width `scale` centered at `center` the transformed integrand is
/// constant and the result is exact.
pub fn integrate_infinite(
    f: impl Fn(f64) -> f64,
    center: f64,
    scale: f64,
    rel_tol: f64,
) -> Result<Quadrature, QuadError> {
    assert!(scale > 0.0, "scale must be positive");
    let g = move |theta: f64| {
        let c = theta.cos();
        let x = center + scale * theta.tan();
        f(x) * scale / (c * c)
    };
    adaptive(
        g,
        -std::f64::consts::FRAC_PI_2,
        std::f64::consts::FRAC_PI_2,
        rel_tol,
        0.0,
    )
}
