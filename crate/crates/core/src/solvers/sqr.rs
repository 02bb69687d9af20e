use nalgebra::{DMatrix, DVector};

use super::{
    check_dims, check_warm, dot, kkt_coord, smoothed_check_loss, smoothed_check_score,
    soft_threshold, validate_tau, PenaltySpec, SolveReport, SolverConfig,
};
use crate::error::Result;
use crate::model::{column, CoefRole, CoefVector, QuantileLevel};

/// ℓ1-penalized convolution-smoothed quantile regression,
/// `n⁻¹ Σ ℓ_h(y_i − x_iᵀβ) + λ Σ_j w_j |β_j|`.
///
/// Proximal gradient with Barzilai–Borwein step sizes and backtracking on a
/// working set of coordinates. The working set starts from the unpenalized
/// coordinates, the warm-start support and the KKT violators at the start
/// point, and grows until the full-gradient KKT check passes.
pub fn sqr_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: QuantileLevel,
    pen: &PenaltySpec,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let t = validate_tau(tau)?;
    check_dims(x, y, pen)?;
    cfg.validate()?;
    let (n, p) = x.shape();
    let h = cfg.bandwidth.resolve(t, n, p);
    let mut beta = check_warm(cfg, p)?;
    let mut state = SqrState::new(x, y, t, h, pen, &beta);

    let mut in_set = vec![false; p];
    let mut work: Vec<usize> = Vec::new();
    for j in 0..p {
        if pen.threshold(j) == 0.0 || beta[j] != 0.0 {
            in_set[j] = true;
            work.push(j);
        }
    }
    let grad = state.full_gradient();
    for j in 0..p {
        if !in_set[j] && grad[j].abs() > pen.threshold(j) {
            in_set[j] = true;
            work.push(j);
        }
    }
    work.sort_unstable();

    let mut trace = Vec::new();
    if cfg.trace {
        trace.push(state.loss + pen.penalty(&beta));
    }
    let mut iterations = 0usize;
    let mut converged = false;
    let mut kkt;
    loop {
        let inner_ok = state.solve_restricted(&work, &mut beta, cfg, &mut iterations, &mut trace);
        let grad = state.full_gradient();
        kkt = (0..p)
            .map(|j| kkt_coord(beta[j], grad[j], pen.threshold(j)))
            .fold(0.0, f64::max);
        let mut added = false;
        for j in 0..p {
            if !in_set[j] && grad[j].abs() > pen.threshold(j) + 0.5 * cfg.kkt_tol {
                in_set[j] = true;
                work.push(j);
                added = true;
            }
        }
        if added {
            work.sort_unstable();
        }
        if inner_ok && kkt <= cfg.kkt_tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        if !added && !inner_ok {
            break;
        }
    }
    let objective = state.loss + pen.penalty(&beta);
    Ok(SolveReport {
        coefficients: CoefVector::new(beta, CoefRole::Quantile)?,
        iterations,
        converged,
        objective,
        kkt_violation: kkt,
        bandwidth: Some(h),
        trace,
    })
}

struct SqrState<'a> {
    x: &'a DMatrix<f64>,
    tau: f64,
    h: f64,
    pen: &'a PenaltySpec,
    resid: Vec<f64>,
    score: Vec<f64>,
    loss: f64,
    nf: f64,
}

impl<'a> SqrState<'a> {
    fn new(
        x: &'a DMatrix<f64>,
        y: &DVector<f64>,
        tau: f64,
        h: f64,
        pen: &'a PenaltySpec,
        beta: &DVector<f64>,
    ) -> Self {
        let resid: Vec<f64> = (y - x * beta).iter().copied().collect();
        let n = resid.len();
        let mut s = Self {
            x,
            tau,
            h,
            pen,
            resid,
            score: vec![0.0; n],
            loss: 0.0,
            nf: n as f64,
        };
        s.loss = s.loss_of(&s.resid);
        s
    }

    fn loss_of(&self, r: &[f64]) -> f64 {
        r.iter()
            .map(|&u| smoothed_check_loss(self.tau, self.h, u))
            .sum::<f64>()
            / self.nf
    }

    fn refresh_score(&mut self) {
        for (s, &u) in self.score.iter_mut().zip(&self.resid) {
            *s = smoothed_check_score(self.tau, self.h, u);
        }
    }

    /// Gradient of the smoothed loss in every coordinate.
    fn full_gradient(&mut self) -> Vec<f64> {
        self.refresh_score();
        (0..self.x.ncols())
            .map(|j| -dot(column(self.x, j), &self.score) / self.nf)
            .collect()
    }

    /// Runs proximal-gradient iterations on the coordinates in `work`.
    /// Returns true once the restricted problem meets both tolerances.
    fn solve_restricted(
        &mut self,
        work: &[usize],
        beta: &mut DVector<f64>,
        cfg: &SolverConfig,
        iterations: &mut usize,
        trace: &mut Vec<f64>,
    ) -> bool {
        let m = work.len();
        if m == 0 {
            return true;
        }
        let thresholds: Vec<f64> = work.iter().map(|&j| self.pen.threshold(j)).collect();
        let lip = work
            .iter()
            .map(|&j| {
                let c = column(self.x, j);
                dot(c, c) / self.nf
            })
            .sum::<f64>()
            / (2.0 * self.h);
        let mut step = 1.0 / lip.max(f64::MIN_POSITIVE);
        let mut grad = vec![0.0; m];
        let mut prev_grad = vec![0.0; m];
        let mut prev_beta = vec![0.0; m];
        let mut last_change = f64::INFINITY;
        let mut first = true;
        let mut trial = vec![0.0; m];
        let mut trial_resid = self.resid.clone();

        while *iterations < cfg.max_iter {
            self.refresh_score();
            for (g, &j) in grad.iter_mut().zip(work) {
                *g = -dot(column(self.x, j), &self.score) / self.nf;
            }
            let kkt = work
                .iter()
                .zip(&grad)
                .zip(&thresholds)
                .map(|((&j, &g), &t)| kkt_coord(beta[j], g, t))
                .fold(0.0, f64::max);
            if kkt <= 0.5 * cfg.kkt_tol || (last_change < cfg.tol && kkt <= cfg.kkt_tol) {
                return true;
            }
            if !first {
                let mut ss = 0.0;
                let mut sy = 0.0;
                let mut yy = 0.0;
                for k in 0..m {
                    let s = beta[work[k]] - prev_beta[k];
                    let d = grad[k] - prev_grad[k];
                    ss += s * s;
                    sy += s * d;
                    yy += d * d;
                }
                if sy > 0.0 {
                    // alternate the two Barzilai–Borwein step lengths
                    step = if (*iterations).is_multiple_of(2) { ss / sy } else { sy / yy };
                } else {
                    step *= 2.0;
                }
            }
            first = false;
            for k in 0..m {
                prev_beta[k] = beta[work[k]];
                prev_grad[k] = grad[k];
            }

            // backtracking on the quadratic upper bound
            let mut accepted = false;
            for _ in 0..60 {
                let mut lin = 0.0;
                let mut quad = 0.0;
                trial_resid.copy_from_slice(&self.resid);
                for k in 0..m {
                    let b = prev_beta[k];
                    let nb = soft_threshold(b - step * grad[k], step * thresholds[k]);
                    trial[k] = nb;
                    let d = nb - b;
                    if d != 0.0 {
                        lin += grad[k] * d;
                        quad += d * d;
                        for (r, &xv) in trial_resid.iter_mut().zip(column(self.x, work[k])) {
                            *r -= d * xv;
                        }
                    }
                }
                let new_loss = self.loss_of(&trial_resid);
                if new_loss <= self.loss + lin + quad / (2.0 * step) + 1e-15 * self.loss.abs() {
                    accepted = true;
                    let mut change = 0.0f64;
                    for k in 0..m {
                        change = change.max((trial[k] - prev_beta[k]).abs());
                        beta[work[k]] = trial[k];
                    }
                    last_change = change;
                    std::mem::swap(&mut self.resid, &mut trial_resid);
                    let old = self.loss + self.pen_on(work, &prev_beta);
                    self.loss = new_loss;
                    debug_assert!(self.loss + self.pen_on_beta(work, beta) <= old + 1e-10 * old.abs().max(1.0));
                    break;
                }
                step *= 0.5;
            }
            *iterations += 1;
            if cfg.trace {
                trace.push(self.loss + self.pen.penalty(beta));
            }
            if !accepted {
                return false;
            }
        }
        false
    }

    fn pen_on(&self, work: &[usize], vals: &[f64]) -> f64 {
        work.iter()
            .zip(vals)
            .map(|(&j, v)| self.pen.threshold(j) * v.abs())
            .sum()
    }

    fn pen_on_beta(&self, work: &[usize], beta: &DVector<f64>) -> f64 {
        work.iter().map(|&j| self.pen.threshold(j) * beta[j].abs()).sum()
    }
}
