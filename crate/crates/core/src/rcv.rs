//! Refitted cross-validation estimates of the score variance σ_s² and the
//! projection residual variance σ_ω².

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::inference::select_projection;
use crate::model::{adjusted_responses, Dataset, QuantileLevel};
use crate::solvers::{default_bandwidth, least_squares, sqr_fit, Bandwidth, PenaltySpec, SolverConfig};
use crate::twostep::{fit_two_step, LambdaRule, TwoStepConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RcvConfig {
    pub lambda_q: LambdaRule,
    pub lambda_e: LambdaRule,
    pub lambda_m: LambdaRule,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for RcvConfig {
    fn default() -> Self {
        Self {
            lambda_q: LambdaRule::default(),
            lambda_e: LambdaRule::default(),
            lambda_m: crate::inference::default_projection_rule(0),
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcvEstimate {
    pub sigma_s2: f64,
    pub sigma_omega2: f64,
    /// `(σ̂²_{s,1}, σ̂²_{s,2}, σ̂²_{ω,1}, σ̂²_{ω,2})`; index 1 selects on S₁ and
    /// refits on S₂.
    pub half_estimates: [f64; 4],
    pub split_sizes: (usize, usize),
    /// `(ŝ_q, ŝ_e, ŝ_m)` selected on S₁ and on S₂.
    pub support_sizes: [(usize, usize, usize); 2],
    pub split_seed: u64,
}

/// Random split into halves of sizes ⌈n/2⌉ and ⌊n/2⌋, each sorted.
pub fn rcv_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = n.div_ceil(2);
    let mut a = perm[..cut].to_vec();
    let mut b = perm[cut..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

struct Half {
    sigma_s2: f64,
    sigma_omega2: f64,
    sizes: (usize, usize, usize),
}

/// Unpenalized least squares on `cols`, embedded in a length-`p` vector.
fn restricted_ls(x: &DMatrix<f64>, y: &DVector<f64>, cols: &[usize]) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(x.ncols());
    if cols.is_empty() {
        return Ok(out);
    }
    let coef = least_squares(&x.select_columns(cols.iter()), y)?;
    for (k, &c) in cols.iter().enumerate() {
        out[c] = coef[k];
    }
    Ok(out)
}

fn with_offset(ds: &Dataset, support: &[usize]) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..ds.offset()).collect();
    cols.extend_from_slice(support);
    cols
}

/// Select supports on `sel`, refit without penalty on `fit`.
fn half_estimate(sel: &Dataset, fit: &Dataset, tau: QuantileLevel, j: usize, cfg: &RcvConfig, half: usize) -> Result<Half> {
    let tcfg = TwoStepConfig {
        lambda_q: cfg.lambda_q.clone(),
        lambda_e: cfg.lambda_e.clone(),
        solver: cfg.solver.clone(),
        standardize: false,
    };
    let two = fit_two_step(sel, tau, &tcfg)?;
    let proj = select_projection(sel, j, &cfg.lambda_m, &cfg.solver)?;
    let (sq, se, sm) = (two.support_q.len(), two.support_e.len(), proj.support_m.len());
    let nb = fit.n();
    let off = fit.offset();
    let total = sm + sq + se;
    if nb <= total || nb <= sq.max(se).max(sm) + off {
        return Err(EsError::RcvCardinality { half, selected: total });
    }
    let t = tau.value();

    // quantile refit on Ŝ_q with the bandwidth of the half-sample
    let cols_q = with_offset(fit, &two.support_q);
    let mut beta = DVector::zeros(fit.p());
    if !cols_q.is_empty() {
        let xq = fit.x().select_columns(cols_q.iter());
        let h = default_bandwidth(t, nb, fit.p());
        let solver = SolverConfig {
            bandwidth: Bandwidth::Fixed(h),
            warm_start: None,
            ..cfg.solver.clone()
        };
        let rep = sqr_fit(&xq, fit.y(), tau, &PenaltySpec::new(0.0, vec![0.0; cols_q.len()])?, &solver)?;
        for (k, &c) in cols_q.iter().enumerate() {
            beta[c] = rep.coefficients.values[k];
        }
    }
    let z = adjusted_responses(fit, &beta, tau);

    let theta = restricted_ls(fit.x(), &(&z / t), &with_offset(fit, &two.support_e))?;
    let e = &z - fit.fitted(&theta) * t;

    let mut cols_m = with_offset(fit, &proj.support_m);
    cols_m.retain(|&c| c != j);
    let xj = DVector::from_column_slice(fit.col(j));
    let gamma = restricted_ls(fit.x(), &xj, &cols_m)?;
    let omega = &xj - fit.fitted(&gamma);

    let s2: f64 = omega.iter().zip(e.iter()).map(|(w, r)| (w * r).powi(2)).sum();
    let w2: f64 = omega.norm_squared();
    Ok(Half {
        sigma_s2: s2 / (nb - total) as f64,
        sigma_omega2: w2 / (nb - sm) as f64,
        sizes: (sq, se, sm),
    })
}

/// RCV estimate on a given split: each half selects, the other refits, and
/// the two intermediate estimates are averaged.
pub fn rcv_variance_on_split(
    ds: &Dataset,
    tau: QuantileLevel,
    j: usize,
    cfg: &RcvConfig,
    s1: &[usize],
    s2: &[usize],
) -> Result<RcvEstimate> {
    let d1 = ds.subset_rows(s1)?;
    let d2 = ds.subset_rows(s2)?;
    let (a, b) = rayon::join(
        || half_estimate(&d1, &d2, tau, j, cfg, 1),
        || half_estimate(&d2, &d1, tau, j, cfg, 2),
    );
    let (a, b) = (a?, b?);
    let est = RcvEstimate {
        sigma_s2: (a.sigma_s2 + b.sigma_s2) / 2.0,
        sigma_omega2: (a.sigma_omega2 + b.sigma_omega2) / 2.0,
        half_estimates: [a.sigma_s2, b.sigma_s2, a.sigma_omega2, b.sigma_omega2],
        split_sizes: (s1.len(), s2.len()),
        support_sizes: [a.sizes, b.sizes],
        split_seed: cfg.seed,
    };
    if !(est.sigma_s2 > 0.0 && est.sigma_omega2 > 0.0) {
        return Err(EsError::DegenerateVariance(format!(
            "rcv estimates sigma_s2 = {}, sigma_omega2 = {}",
            est.sigma_s2, est.sigma_omega2
        )));
    }
    Ok(est)
}

/// RCV estimate of `(σ_s², σ_ω²)` for coordinate `j`.
pub fn rcv_variance(ds: &Dataset, tau: QuantileLevel, j: usize, cfg: &RcvConfig) -> Result<RcvEstimate> {
    if ds.n() < 4 {
        return Err(EsError::InvalidArgument(format!("rcv needs n >= 4, got {}", ds.n())));
    }
    let (s1, s2) = rcv_split(ds.n(), cfg.seed);
    rcv_variance_on_split(ds, tau, j, cfg, &s1, &s2)
}

/// Plug-in moments `(n⁻¹Σω̂²ê², n⁻¹Σω̂²)` without sample splitting.
pub fn naive_variance(es_residuals: &DVector<f64>, omega_hat: &DVector<f64>) -> (f64, f64) {
    let n = es_residuals.len() as f64;
    let s: f64 = es_residuals
        .iter()
        .zip(omega_hat.iter())
        .map(|(e, w)| (e * w).powi(2))
        .sum();
    (s / n, omega_hat.norm_squared() / n)
}
