//! Weighted nonlinear least squares with bounds, fixed and tied parameters.
//!
//! The solver is a Levenberg–Marquardt iteration on internally transformed
//! coordinates: two-sided bounds map through a sine transform, one-sided
//! bounds through a hyperbolic shift, so the optimizer itself is
//! unconstrained and the covariance stays meaningful at interior optima.
//! Weights default to Poisson (`w = 1/max(y, 1)`) when no uncertainties are
//! supplied; the parameter covariance is `(J^T W J)^-1` scaled by the
//! reduced chi-square.

use crate::spectrum::Spectrum;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("parameter '{name}': {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("not enough data: {points} masked points for {free} free parameters (need dof >= 1)")]
    InsufficientData { points: usize, free: usize },
    #[error("normal matrix is singular: parameters '{0}' and '{1}' are degenerate")]
    Singular(String, String),
    #[error("model produced a non-finite value at the initial parameters")]
    NonFiniteModel,
    #[error("weighted average of an empty sample list")]
    EmptyAverage,
    #[error("weighted sample must have finite positive sigma (got {0})")]
    InvalidSample(f64),
}

/// One model parameter: name, starting value, box bounds, and an optional
/// fixed/tied constraint. A tied parameter always equals its master.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub init: f64,
    pub lower: f64,
    pub upper: f64,
    pub fixed: bool,
    pub tie: Option<String>,
}

impl ParamSpec {
    pub fn free(name: &str, init: f64) -> Self {
        Self {
            name: name.to_owned(),
            init,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            fixed: false,
            tie: None,
        }
    }

    pub fn bounded(name: &str, init: f64, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_owned(),
            init,
            lower,
            upper,
            fixed: false,
            tie: None,
        }
    }

    pub fn fixed(name: &str, value: f64) -> Self {
        Self {
            name: name.to_owned(),
            init: value,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            fixed: true,
            tie: None,
        }
    }

    pub fn tied(name: &str, master: &str) -> Self {
        Self {
            name: name.to_owned(),
            init: 0.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            fixed: false,
            tie: Some(master.to_owned()),
        }
    }
}

/// Solver options.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative chi-square decrease below which the fit counts as converged.
    pub ftol: f64,
    /// Relative internal step size below which the fit counts as converged.
    pub xtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: 1e-12,
            xtol: 1e-12,
        }
    }
}

/// A value with a 1-sigma uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub value: f64,
    pub sigma: f64,
}

impl WeightedSample {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }
}

/// Inverse-variance weighted mean:
/// `mean = sum(v_i / s_i^2) / sum(1 / s_i^2)`, `sigma = sqrt(1 / sum(1 / s_i^2))`.
pub fn weighted_average(samples: &[WeightedSample]) -> Result<WeightedSample, FitError> {
    if samples.is_empty() {
        return Err(FitError::EmptyAverage);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for s in samples {
        if !(s.sigma.is_finite() && s.sigma > 0.0) {
            return Err(FitError::InvalidSample(s.sigma));
        }
        let w = 1.0 / (s.sigma * s.sigma);
        num += w * s.value;
        den += w;
    }
    Ok(WeightedSample {
        value: num / den,
        sigma: (1.0 / den).sqrt(),
    })
}

/// Fit outcome: full parameter vector, per-parameter uncertainties, the
/// free-parameter covariance, and the accepted chi-square trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub free_names: Vec<String>,
    /// Covariance of the free parameters (row/column order = `free_names`).
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub n_iter: usize,
    /// chi-square after each accepted step, starting from the initial value.
    pub chi2_trace: Vec<f64>,
}

impl FitResult {
    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.values[i])
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.sigmas[i])
    }

    /// `(value, sigma)` pair for one parameter.
    pub fn estimate(&self, name: &str) -> Option<WeightedSample> {
        let i = self.index(name)?;
        Some(WeightedSample::new(self.values[i], self.sigmas[i]))
    }

    /// Covariance entry for two free parameters.
    pub fn covar(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.free_names.iter().position(|n| n == a)?;
        let j = self.free_names.iter().position(|n| n == b)?;
        Some(self.covariance[i][j])
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.chi2 / self.dof as f64
    }
}

/// Smooth bound transforms between internal (unconstrained) and external
/// (bounded) coordinates.
#[derive(Debug, Clone, Copy)]
enum Transform {
    Identity,
    Lower(f64),
    Upper(f64),
    Both(f64, f64),
}

impl Transform {
    fn from_bounds(lower: f64, upper: f64) -> Self {
        match (lower.is_finite(), upper.is_finite()) {
            (false, false) => Transform::Identity,
            (true, false) => Transform::Lower(lower),
            (false, true) => Transform::Upper(upper),
            (true, true) => Transform::Both(lower, upper),
        }
    }

    fn to_external(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Lower(lo) => lo - 1.0 + (u * u + 1.0).sqrt(),
            Transform::Upper(hi) => hi + 1.0 - (u * u + 1.0).sqrt(),
            Transform::Both(lo, hi) => lo + 0.5 * (hi - lo) * (u.sin() + 1.0),
        }
    }

    /// Internal coordinate for a starting value. A seed sitting exactly on
    /// a finite bound is moved marginally inside: at the bound the
    /// transform derivative vanishes and the parameter could never move.
    fn to_internal(self, x: f64) -> f64 {
        const NUDGE: f64 = 0.05;
        match self {
            Transform::Identity => x,
            Transform::Lower(lo) => {
                let s = (x - lo + 1.0).max(1.0);
                (s * s - 1.0).sqrt().max(NUDGE)
            }
            Transform::Upper(hi) => {
                let s = (hi - x + 1.0).max(1.0);
                (s * s - 1.0).sqrt().max(NUDGE)
            }
            Transform::Both(lo, hi) => {
                let t = (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
                t.asin()
                    .clamp(-std::f64::consts::FRAC_PI_2 + NUDGE, std::f64::consts::FRAC_PI_2 - NUDGE)
            }
        }
    }

    fn dext_dint(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Lower(_) => u / (u * u + 1.0).sqrt(),
            Transform::Upper(_) => -u / (u * u + 1.0).sqrt(),
            Transform::Both(lo, hi) => 0.5 * (hi - lo) * u.cos(),
        }
    }

    /// Map an internal coordinate back onto the principal (monotone) branch
    /// of the transform; external values are unchanged.
    fn rewrap(self, u: f64) -> f64 {
        match self {
            Transform::Both(_, _) if u.abs() > std::f64::consts::FRAC_PI_2 => u.sin().asin(),
            _ => u,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binding {
    Free { slot: usize },
    Fixed,
    Tied { target: usize },
}

struct Problem<'a> {
    specs: &'a [ParamSpec],
    bindings: Vec<Binding>,
    transforms: Vec<Transform>, // indexed by free slot
    free_spec_idx: Vec<usize>,  // free slot -> spec index
}

impl<'a> Problem<'a> {
    fn new(specs: &'a [ParamSpec]) -> Result<Self, FitError> {
        let mut bindings = vec![Binding::Fixed; specs.len()];
        let mut transforms = Vec::new();
        let mut free_spec_idx = Vec::new();

        for (i, s) in specs.iter().enumerate() {
            if !s.init.is_finite() {
                return Err(FitError::InvalidSpec {
                    name: s.name.clone(),
                    reason: "initial value is not finite".into(),
                });
            }
            if s.lower > s.upper {
                return Err(FitError::InvalidSpec {
                    name: s.name.clone(),
                    reason: format!("lower bound {} above upper bound {}", s.lower, s.upper),
                });
            }
            if s.tie.is_some() {
                continue; // resolved below
            }
            if s.fixed {
                bindings[i] = Binding::Fixed;
                continue;
            }
            if s.init < s.lower || s.init > s.upper {
                return Err(FitError::InvalidSpec {
                    name: s.name.clone(),
                    reason: format!(
                        "initial value {} outside bounds [{}, {}]",
                        s.init, s.lower, s.upper
                    ),
                });
            }
            bindings[i] = Binding::Free {
                slot: transforms.len(),
            };
            transforms.push(Transform::from_bounds(s.lower, s.upper));
            free_spec_idx.push(i);
        }

        // Resolve ties: follow chains to a terminal free or fixed parameter.
        for (i, s) in specs.iter().enumerate() {
            let Some(master_name) = &s.tie else { continue };
            if s.fixed {
                return Err(FitError::InvalidSpec {
                    name: s.name.clone(),
                    reason: "parameter cannot be both fixed and tied".into(),
                });
            }
            let mut seen = vec![i];
            let mut cursor = master_name.clone();
            let target = loop {
                let Some(j) = specs.iter().position(|p| p.name == cursor) else {
                    return Err(FitError::InvalidSpec {
                        name: s.name.clone(),
                        reason: format!("tied to unknown parameter '{cursor}'"),
                    });
                };
                if seen.contains(&j) {
                    return Err(FitError::InvalidSpec {
                        name: s.name.clone(),
                        reason: "tie cycle detected".into(),
                    });
                }
                seen.push(j);
                match &specs[j].tie {
                    Some(next) => cursor = next.clone(),
                    None => break j,
                }
            };
            bindings[i] = Binding::Tied { target };
        }

        Ok(Self {
            specs,
            bindings,
            transforms,
            free_spec_idx,
        })
    }

    fn n_free(&self) -> usize {
        self.free_spec_idx.len()
    }

    fn initial_internal(&self) -> Vec<f64> {
        self.free_spec_idx
            .iter()
            .zip(&self.transforms)
            .map(|(&i, t)| t.to_internal(self.specs[i].init))
            .collect()
    }

    fn full_values(&self, u: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.specs.len()];
        for (i, b) in self.bindings.iter().enumerate() {
            match *b {
                Binding::Free { slot } => full[i] = self.transforms[slot].to_external(u[slot]),
                Binding::Fixed => full[i] = self.specs[i].init,
                Binding::Tied { .. } => {}
            }
        }
        for (i, b) in self.bindings.iter().enumerate() {
            if let Binding::Tied { target } = *b {
                full[i] = full[target];
            }
        }
        full
    }
}

/// Find the pair of most collinear Jacobian columns, used to name the
/// degenerate parameters when the normal matrix cannot be inverted.
fn degenerate_pair(jac: &DMatrix<f64>, names: &[String]) -> (String, String) {
    let m = jac.ncols();
    let norms: Vec<f64> = (0..m).map(|k| jac.column(k).norm()).collect();
    for (k, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            return (names[k].clone(), names[k].clone());
        }
    }
    let mut best = (0, usize::min(1, m - 1));
    let mut best_cos = -1.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let cos = (jac.column(i).dot(&jac.column(j)) / (norms[i] * norms[j])).abs();
            if cos > best_cos {
                best_cos = cos;
                best = (i, j);
            }
        }
    }
    (names[best.0].clone(), names[best.1].clone())
}

struct Evaluator<'a, M> {
    model: &'a M,
    x: &'a [f64],
    y: &'a [f64],
    sqrt_w: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a, M: Fn(&[f64], &[f64], &mut [f64])> Evaluator<'a, M> {
    /// Weighted residuals `(y - f) * sqrt(w)`; returns None on non-finite model output.
    fn residuals(&mut self, full: &[f64], out: &mut DVector<f64>) -> Option<f64> {
        (self.model)(full, self.x, &mut self.scratch);
        let mut chi2 = 0.0;
        for j in 0..self.x.len() {
            let f = self.scratch[j];
            if !f.is_finite() {
                return None;
            }
            let r = (self.y[j] - f) * self.sqrt_w[j];
            out[j] = r;
            chi2 += r * r;
        }
        Some(chi2)
    }
}

/// Weighted nonlinear least squares of `model` against `(x, y)`.
///
/// `model(full_params, x, out)` fills `out[j]` with the model value at
/// `x[j]`; `full_params` follows the order of `specs` and includes fixed and
/// tied entries. When `sigma` is `None`, Poisson weights `1/max(y, 1)` are
/// used. Non-convergence within `max_iter` is not an error: the result
/// carries `converged = false` and the best parameters found.
pub fn least_squares<M>(
    model: M,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
    specs: &[ParamSpec],
    opts: &FitOptions,
) -> Result<FitResult, FitError>
where
    M: Fn(&[f64], &[f64], &mut [f64]),
{
    assert_eq!(x.len(), y.len(), "x and y must have equal length");
    if let Some(s) = sigma {
        assert_eq!(s.len(), y.len(), "sigma and y must have equal length");
    }
    let problem = Problem::new(specs)?;
    let n = x.len();
    let m = problem.n_free();
    if n < m + 1 {
        return Err(FitError::InsufficientData { points: n, free: m });
    }

    let sqrt_w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|&v| 1.0 / v).collect(),
        None => y.iter().map(|&v| 1.0 / v.max(1.0).sqrt()).collect(),
    };
    let mut eval = Evaluator {
        model: &model,
        x,
        y,
        sqrt_w,
        scratch: vec![0.0; n],
    };

    let mut u = problem.initial_internal();
    let mut resid = DVector::zeros(n);
    let mut full = problem.full_values(&u);
    let mut chi2 = eval
        .residuals(&full, &mut resid)
        .ok_or(FitError::NonFiniteModel)?;
    let mut trace = vec![chi2];

    let free_names: Vec<String> = problem
        .free_spec_idx
        .iter()
        .map(|&i| specs[i].name.clone())
        .collect();

    // Degenerate fit: everything fixed. Report chi2 with dof = n.
    if m == 0 {
        let sigmas = vec![0.0; specs.len()];
        return Ok(FitResult {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            values: full,
            sigmas,
            free_names,
            covariance: Vec::new(),
            chi2,
            dof: n,
            converged: true,
            n_iter: 0,
            chi2_trace: trace,
        });
    }

    let fd_step = f64::EPSILON.sqrt();
    let jacobian = |eval: &mut Evaluator<M>, u: &[f64], base: &DVector<f64>| -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(n, m);
        let mut pert = DVector::zeros(n);
        let mut u_try = u.to_vec();
        for k in 0..m {
            let h = fd_step * u[k].abs().max(1.0);
            u_try[k] = u[k] + h;
            let full = problem.full_values(&u_try);
            eval.residuals(&full, &mut pert)?;
            let inv_h = 1.0 / h;
            for j in 0..n {
                // d(residual)/du = -(d model/du) * sqrt(w)
                jac[(j, k)] = (base[j] - pert[j]) * inv_h;
            }
            u_try[k] = u[k];
        }
        Some(jac)
    };

    let mut lambda = 1e-3;
    let mut converged = false;
    let mut n_iter = 0;
    let mut trial = DVector::zeros(n);

    'outer: for _ in 0..opts.max_iter {
        if chi2 == 0.0 {
            converged = true;
            break;
        }
        let Some(jac) = jacobian(&mut eval, &u, &resid) else {
            break; // model turned non-finite during differentiation
        };
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &resid;

        loop {
            let mut damped = a.clone();
            for k in 0..m {
                let d = a[(k, k)].max(1e-30);
                damped[(k, k)] += lambda * d;
            }
            let Some(chol) = Cholesky::new(damped) else {
                lambda *= 10.0;
                if lambda > 1e14 {
                    break 'outer;
                }
                continue;
            };
            let mut step = chol.solve(&g);
            // Relative step clamp: a single iteration may not move any
            // internal coordinate by more than twice its own scale, which
            // keeps sine-transformed parameters on their monotone branch.
            let overshoot = step
                .iter()
                .zip(&u)
                .map(|(s, uv)| s.abs() / (2.0 * uv.abs().max(1.0)))
                .fold(0.0_f64, f64::max);
            if overshoot > 1.0 {
                step /= overshoot;
            }
            let u_try: Vec<f64> = u
                .iter()
                .zip(step.iter())
                .zip(&problem.transforms)
                .map(|((a, b), t)| t.rewrap(a + b))
                .collect();
            let full_try = problem.full_values(&u_try);
            match eval.residuals(&full_try, &mut trial) {
                Some(chi2_try) if chi2_try <= chi2 => {
                    let dchi = chi2 - chi2_try;
                    let max_step = step
                        .iter()
                        .zip(&u)
                        .map(|(s, uv)| s.abs() / uv.abs().max(1.0))
                        .fold(0.0_f64, f64::max);
                    u = u_try;
                    full = full_try;
                    std::mem::swap(&mut resid, &mut trial);
                    chi2 = chi2_try;
                    trace.push(chi2);
                    n_iter += 1;
                    lambda = (lambda * 0.1).max(1e-14);
                    if dchi <= opts.ftol * chi2.max(f64::MIN_POSITIVE)
                        || max_step <= opts.xtol
                    {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > 1e14 {
                        // No further improvement possible from here.
                        converged = trace.len() > 1;
                        break 'outer;
                    }
                }
            }
        }
    }

    // Covariance at the final point, in external coordinates. The reduced
    // chi-square scaling only ever inflates: shrinking the errors when the
    // Poisson weights overdisperse at low counts would understate them.
    let jac = jacobian(&mut eval, &u, &resid).ok_or(FitError::NonFiniteModel)?;
    let a = jac.transpose() * &jac;
    let dof = n - m;
    let scale = (chi2 / dof as f64).max(1.0);
    let cov_int = match Cholesky::new(a.clone()) {
        Some(chol) => chol.inverse() * scale,
        None => {
            let (p1, p2) = degenerate_pair(&jac, &free_names);
            return Err(FitError::Singular(p1, p2));
        }
    };
    let dext: Vec<f64> = (0..m)
        .map(|k| problem.transforms[k].dext_dint(u[k]))
        .collect();
    let mut covariance = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let c = 0.5 * (cov_int[(i, j)] + cov_int[(j, i)]) * dext[i] * dext[j];
            covariance[i][j] = c;
            covariance[j][i] = c;
        }
    }

    let mut sigmas = vec![0.0; specs.len()];
    for (slot, &spec_idx) in problem.free_spec_idx.iter().enumerate() {
        sigmas[spec_idx] = covariance[slot][slot].max(0.0).sqrt();
    }
    for (i, b) in problem.bindings.iter().enumerate() {
        if let Binding::Tied { target } = *b {
            sigmas[i] = sigmas[target];
        }
    }

    Ok(FitResult {
        names: specs.iter().map(|s| s.name.clone()).collect(),
        values: full,
        sigmas,
        free_names,
        covariance,
        chi2,
        dof,
        converged,
        n_iter,
        chi2_trace: trace,
    })
}

/// Poisson-weighted least squares of a spectral model on masked data.
///
/// Points where `mask(E)` is false are dropped before fitting; per-point
/// uncertainties stored in the spectrum take precedence over Poisson weights.
pub fn fit_spectrum<M>(
    model: M,
    spectrum: &Spectrum,
    mask: impl Fn(f64) -> bool,
    specs: &[ParamSpec],
    opts: &FitOptions,
) -> Result<FitResult, FitError>
where
    M: Fn(&[f64], &[f64], &mut [f64]),
{
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut s = Vec::new();
    for (i, (&e, &c)) in spectrum
        .energies_ev()
        .iter()
        .zip(spectrum.counts())
        .enumerate()
    {
        if mask(e) {
            x.push(e);
            y.push(c);
            if let Some(sig) = spectrum.sigma() {
                s.push(sig[i]);
            }
        }
    }
    let sigma = if s.is_empty() { None } else { Some(s.as_slice()) };
    least_squares(model, &x, &y, sigma, specs, opts)
}
