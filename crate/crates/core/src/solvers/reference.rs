use nalgebra::{DMatrix, DVector};

use super::{
    check_dims, check_warm, kkt_violation, smoothed_check_loss, smoothed_check_score,
    soft_threshold, validate_tau, PenaltySpec, SolveReport, SolverConfig,
};
use crate::error::Result;
use crate::model::{CoefRole, CoefVector, QuantileLevel};

/// Smooth part handled by [`reference_prox_solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceProblem {
    LeastSquares,
    SmoothedQuantile(QuantileLevel),
}

/// Plain ISTA with backtracking on the full coordinate set.
///
/// Slow but simple; intended as an independent check of [`super::lasso_ls_fit`]
/// and [`super::sqr_fit`] on small problems (n·p up to ~1e5).
pub fn reference_prox_solve(
    problem: ReferenceProblem,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    pen: &PenaltySpec,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    check_dims(x, y, pen)?;
    cfg.validate()?;
    let (n, p) = x.shape();
    let nf = n as f64;
    let (smooth, h, role) = match problem {
        ReferenceProblem::LeastSquares => (None, None, CoefRole::Es),
        ReferenceProblem::SmoothedQuantile(tau) => {
            let t = validate_tau(tau)?;
            let h = cfg.bandwidth.resolve(t, n, p);
            (Some(t), Some(h), CoefRole::Quantile)
        }
    };
    let loss = |r: &DVector<f64>| match smooth {
        None => r.norm_squared() / (2.0 * nf),
        Some(t) => r.iter().map(|&u| smoothed_check_loss(t, h.unwrap(), u)).sum::<f64>() / nf,
    };
    let gradient = |r: &DVector<f64>| -> DVector<f64> {
        let s = match smooth {
            None => r.clone(),
            Some(t) => r.map(|u| smoothed_check_score(t, h.unwrap(), u)),
        };
        -(x.transpose() * s) / nf
    };

    let mut beta = check_warm(cfg, p)?;
    let mut resid = y - x * &beta;
    let mut f = loss(&resid);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut trace = Vec::new();
    let mut g = gradient(&resid);
    while iterations < cfg.max_iter {
        let mut next;
        let mut next_resid;
        let mut next_f;
        loop {
            next = DVector::from_fn(p, |j, _| {
                soft_threshold(beta[j] - step * g[j], step * pen.threshold(j))
            });
            let d = &next - &beta;
            next_resid = y - x * &next;
            next_f = loss(&next_resid);
            if next_f <= f + g.dot(&d) + d.norm_squared() / (2.0 * step) + 1e-15 * f.abs() {
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                break;
            }
        }
        let change = (&next - &beta).amax();
        beta = next;
        resid = next_resid;
        f = next_f;
        g = gradient(&resid);
        iterations += 1;
        if cfg.trace {
            trace.push(f + pen.penalty(&beta));
        }
        if change < cfg.tol && kkt_violation(beta.as_slice(), g.as_slice(), pen) <= cfg.kkt_tol {
            converged = true;
            break;
        }
    }
    let kkt = kkt_violation(beta.as_slice(), g.as_slice(), pen);
    Ok(SolveReport {
        objective: f + pen.penalty(&beta),
        coefficients: CoefVector::new(beta, role)?,
        iterations,
        converged,
        kkt_violation: kkt,
        bandwidth: h,
        trace,
    })
}
