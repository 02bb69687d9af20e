//! Standard normal distribution helpers.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{EsError, Result};

fn standard() -> Normal {
    Normal::standard()
}

pub fn normal_cdf(x: f64) -> f64 {
    standard().cdf(x)
}

pub fn normal_pdf(x: f64) -> f64 {
    standard().pdf(x)
}

/// Φ⁻¹(p) for p in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

/// Lower-tail expected shortfall of N(0,1): `−φ(Φ⁻¹(τ))/τ`.
pub fn normal_tail_es(tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(EsError::InvalidQuantileLevel(tau));
    }
    Ok(-normal_pdf(normal_quantile(tau)) / tau)
}

/// Two-sided critical value `Φ⁻¹(1 − α/2)`.
pub fn two_sided_critical(alpha: f64) -> f64 {
    normal_quantile(1.0 - alpha / 2.0)
}
