use nalgebra::{DMatrix, DVector};

use super::{
    check_dims, dot, smoothed_check_score, sqr_fit, PenaltySpec, SolverConfig,
};
use crate::error::{EsError, Result};
use crate::model::{column, QuantileLevel};

/// Loss whose all-zero (penalized part) solution anchors a penalty path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathProblem {
    LeastSquares,
    SmoothedQuantile(QuantileLevel),
}

/// Smallest λ at which every penalized coordinate is zero at the optimum.
///
/// The unpenalized coordinates (`weights[j] == 0`) are fitted first; λmax is
/// then `max_j |∇_j| / w_j` over the penalized coordinates.
pub fn lambda_path_max(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    problem: PathProblem,
    weights: &[f64],
    cfg: &SolverConfig,
) -> Result<f64> {
    let pen = PenaltySpec::new(0.0, weights.to_vec())?;
    check_dims(x, y, &pen)?;
    let (n, p) = x.shape();
    let nf = n as f64;
    let free: Vec<usize> = (0..p).filter(|&j| weights[j] == 0.0).collect();
    let xf = x.select_columns(free.iter());

    let score: DVector<f64> = match problem {
        PathProblem::LeastSquares => {
            if free.is_empty() {
                y.clone()
            } else {
                let coef = least_squares(&xf, y)?;
                y - &xf * coef
            }
        }
        PathProblem::SmoothedQuantile(tau) => {
            let h = cfg.bandwidth.resolve(tau.value(), n, p);
            let resid = if free.is_empty() {
                y.clone()
            } else {
                let sub = SolverConfig {
                    warm_start: None,
                    bandwidth: super::Bandwidth::Fixed(h),
                    ..cfg.clone()
                };
                let fit = sqr_fit(&xf, y, tau, &PenaltySpec::new(0.0, vec![0.0; free.len()])?, &sub)?;
                y - &xf * fit.coefficients.values
            };
            resid.map(|u| smoothed_check_score(tau.value(), h, u))
        }
    };
    let mut lmax = 0.0f64;
    for (j, &w) in weights.iter().enumerate().take(p) {
        if w > 0.0 {
            let g = dot(column(x, j), score.as_slice()).abs() / nf;
            lmax = lmax.max(g / w);
        }
    }
    Ok(lmax)
}

/// `len` log-spaced values from `lambda_max` down to `ratio · lambda_max`.
pub fn lambda_grid(lambda_max: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len <= 1 || lambda_max <= 0.0 {
        return vec![lambda_max.max(0.0)];
    }
    let lo = (lambda_max * ratio).ln();
    let hi = lambda_max.ln();
    (0..len)
        .map(|k| (hi + (lo - hi) * k as f64 / (len - 1) as f64).exp())
        .collect()
}

/// Unpenalized least squares via Cholesky of the Gram matrix.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = x.transpose() * x;
    let rhs = x.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or(EsError::RankDeficient(x.ncols()))?;
    let sol = chol.solve(&rhs);
    // reject numerically singular systems that slipped through Cholesky
    let diag_min = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    let diag_max = chol.l_dirty().diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if !(diag_min > 1e-7 * diag_max) {
        return Err(EsError::RankDeficient(x.ncols()));
    }
    Ok(sol)
}
