//! Weighted-ℓ1 penalized solvers.
//!
//! * [`lasso_ls_fit`]: cyclic coordinate descent for least squares.
//! * [`sqr_fit`]: proximal gradient (Barzilai–Borwein steps, backtracking,
//!   working sets) for the convolution-smoothed quantile loss.
//! * [`reference_prox_solve`]: plain ISTA with backtracking, used as an
//!   independent oracle in tests.

mod lasso;
mod path;
mod reference;
mod sqr;

pub use lasso::lasso_ls_fit;
pub use path::{lambda_grid, lambda_path_max, PathProblem};
pub(crate) use path::least_squares;
pub use reference::{reference_prox_solve, ReferenceProblem};
pub use sqr::sqr_fit;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::model::{CoefVector, QuantileLevel};

/// Penalty level and per-coordinate weights of a weighted ℓ1 penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl PenaltySpec {
    pub fn new(lambda: f64, weights: Vec<f64>) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(EsError::InvalidArgument(format!(
                "penalty level must be finite and >= 0, got {lambda}"
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(EsError::InvalidArgument(
                "penalty weights must be finite and >= 0".into(),
            ));
        }
        Ok(Self { lambda, weights })
    }

    /// Unit weights with the first `unpenalized` coordinates left free.
    pub fn leading_free(lambda: f64, p: usize, unpenalized: usize) -> Result<Self> {
        let mut w = vec![1.0; p];
        w.iter_mut().take(unpenalized).for_each(|v| *v = 0.0);
        Self::new(lambda, w)
    }

    #[inline]
    pub(crate) fn threshold(&self, j: usize) -> f64 {
        self.lambda * self.weights[j]
    }

    pub fn penalty(&self, coefs: &DVector<f64>) -> f64 {
        self.lambda
            * coefs
                .iter()
                .zip(&self.weights)
                .map(|(b, w)| w * b.abs())
                .sum::<f64>()
    }
}

/// Bandwidth of the smoothed check loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// `max(0.05, sqrt(τ(1−τ)) · (ln p / n)^{1/4})`
    #[default]
    Auto,
    Fixed(f64),
}

impl Bandwidth {
    pub fn resolve(&self, tau: f64, n: usize, p: usize) -> f64 {
        match *self {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => default_bandwidth(tau, n, p),
        }
    }
}

pub fn default_bandwidth(tau: f64, n: usize, p: usize) -> f64 {
    let rate = ((p.max(1) as f64).ln() / n as f64).powf(0.25);
    ((tau * (1.0 - tau)).sqrt() * rate).max(0.05)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Stop when the largest absolute coefficient update falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Required KKT violation at a converged solution.
    pub kkt_tol: f64,
    pub warm_start: Option<DVector<f64>>,
    pub bandwidth: Bandwidth,
    /// Record the objective after every sweep / iteration.
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            kkt_tol: 1e-6,
            warm_start: None,
            bandwidth: Bandwidth::Auto,
            trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(EsError::InvalidArgument("tol must be > 0".into()));
        }
        if self.max_iter < 1 {
            return Err(EsError::InvalidArgument("max_iter must be >= 1".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(EsError::InvalidArgument("bandwidth must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn with_warm_start(&self, start: DVector<f64>) -> Self {
        Self {
            warm_start: Some(start),
            ..self.clone()
        }
    }

    pub fn cold(&self) -> Self {
        Self {
            warm_start: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub coefficients: CoefVector,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub kkt_violation: f64,
    /// Bandwidth used by the smoothed quantile solver, if any.
    pub bandwidth: Option<f64>,
    pub trace: Vec<f64>,
}

pub(crate) fn check_dims(x: &DMatrix<f64>, y: &DVector<f64>, pen: &PenaltySpec) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(EsError::DimensionMismatch(format!(
            "design has {} rows, response {}",
            x.nrows(),
            y.len()
        )));
    }
    if pen.weights.len() != x.ncols() {
        return Err(EsError::DimensionMismatch(format!(
            "{} penalty weights for {} columns",
            pen.weights.len(),
            x.ncols()
        )));
    }
    if x.iter().any(|v| v.is_nan()) || y.iter().any(|v| v.is_nan()) {
        return Err(EsError::InvalidArgument("NaN in solver input".into()));
    }
    Ok(())
}

pub(crate) fn check_warm(cfg: &SolverConfig, p: usize) -> Result<DVector<f64>> {
    match &cfg.warm_start {
        Some(w) if w.len() != p => Err(EsError::DimensionMismatch(format!(
            "warm start has {} entries, expected {p}",
            w.len()
        ))),
        Some(w) => Ok(w.clone()),
        None => Ok(DVector::zeros(p)),
    }
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Largest violation of the weighted-ℓ1 KKT conditions given the gradient of
/// the smooth part at `coefs`.
pub(crate) fn kkt_violation(coefs: &[f64], grad: &[f64], pen: &PenaltySpec) -> f64 {
    coefs
        .iter()
        .zip(grad)
        .enumerate()
        .map(|(j, (&b, &g))| kkt_coord(b, g, pen.threshold(j)))
        .fold(0.0, f64::max)
}

#[inline]
pub(crate) fn kkt_coord(b: f64, g: f64, t: f64) -> f64 {
    if b == 0.0 {
        (g.abs() - t).max(0.0)
    } else {
        (g + t * b.signum()).abs()
    }
}

/// Smoothed check loss: `ρ_τ` convolved with the uniform kernel on `[−h, h]`.
#[inline]
pub fn smoothed_check_loss(tau: f64, h: f64, u: f64) -> f64 {
    if u > h {
        tau * u
    } else if u < -h {
        (tau - 1.0) * u
    } else {
        u * u / (4.0 * h) + (tau - 0.5) * u + h / 4.0
    }
}

/// Derivative of [`smoothed_check_loss`] in `u`.
#[inline]
pub fn smoothed_check_score(tau: f64, h: f64, u: f64) -> f64 {
    if u > h {
        tau
    } else if u < -h {
        tau - 1.0
    } else {
        u / (2.0 * h) + tau - 0.5
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorise the reduction
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn validate_tau(tau: QuantileLevel) -> Result<f64> {
    let t = tau.value();
    if !(t > 0.0 && t < 1.0) {
        return Err(EsError::InvalidQuantileLevel(t));
    }
    Ok(t)
}
