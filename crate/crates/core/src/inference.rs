//! Inference on a single ES coefficient: projection lasso, constrained
//! nuisance fit, the orthogonal score, score test, debiased estimator and
//! Wald interval.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::model::{
    adjusted_responses, column, drop_column, drop_entry, insert_entry, restandardize_coefs,
    standardize, CoefRole, CoefVector, Dataset, QuantileLevel, Tail,
};
use crate::normal::{normal_cdf, normal_quantile};
use crate::rcv::{naive_variance, rcv_variance, RcvConfig, RcvEstimate};
use crate::solvers::{lasso_ls_fit, PenaltySpec, SolverConfig};
use crate::tuning::{cv_select, CvConfig, LambdaPath, SelectionRule, Stage};
use crate::twostep::{upper_tail_transform, LambdaRule, TwoStepFit};

/// Lasso regression of column `j` on the remaining columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFit {
    pub j: usize,
    /// Coefficients on `X_{−j}` (length p − 1, columns in original order).
    pub gamma_hat: CoefVector,
    /// `ω̂_i = X_{ij} − X_{i,−j}ᵀγ̂`.
    pub omega_hat: DVector<f64>,
    pub lambda_m: f64,
    /// Selected non-intercept columns, as indices into the full design.
    pub support_m: Vec<usize>,
    pub tuning: Option<LambdaPath>,
}

fn check_target(ds: &Dataset, j: usize) -> Result<()> {
    if j >= ds.p() || j < ds.offset() {
        return Err(EsError::InvalidArgument(format!(
            "target column {j} must be a non-intercept column of a design with {} columns",
            ds.p()
        )));
    }
    Ok(())
}

/// Maps index `k` of `X_{−j}` back to its column in the full design.
#[inline]
pub fn full_index(k: usize, j: usize) -> usize {
    if k < j {
        k
    } else {
        k + 1
    }
}

/// Projection lasso `(2n)⁻¹Σ(X_{ij} − X_{i,−j}ᵀγ)² + λ_m‖γ‖₁` with the
/// intercept unpenalized.
pub fn fit_projection(ds: &Dataset, j: usize, lambda_m: f64, cfg: &SolverConfig) -> Result<ProjectionFit> {
    check_target(ds, j)?;
    let x = drop_column(ds.x(), j);
    let target = DVector::from_column_slice(ds.col(j));
    let mut weights = ds.penalty_weights();
    weights.remove(j);
    let pen = PenaltySpec::new(lambda_m, weights)?;
    let rep = lasso_ls_fit(&x, &target, &pen, cfg)?;
    let gamma = rep.coefficients.values;
    let omega_hat = &target - &x * &gamma;
    let support_m = (0..gamma.len())
        .filter(|&k| gamma[k] != 0.0 && pen.weights[k] > 0.0)
        .map(|k| full_index(k, j))
        .collect();
    Ok(ProjectionFit {
        j,
        gamma_hat: CoefVector::new(gamma, CoefRole::Projection)?,
        omega_hat,
        lambda_m,
        support_m,
        tuning: None,
    })
}

/// Projection fit with λ_m from `rule` (cross-validation, by default with the
/// one-standard-error rule).
pub fn select_projection(ds: &Dataset, j: usize, rule: &LambdaRule, cfg: &SolverConfig) -> Result<ProjectionFit> {
    check_target(ds, j)?;
    match rule {
        LambdaRule::Fixed(l) => fit_projection(ds, j, *l, cfg),
        LambdaRule::Cv(cv) => {
            // the QR level is irrelevant for the projection stage
            let tau = QuantileLevel::lower(0.5)?;
            let path = cv_select(ds, &Stage::Projection { j }, tau, cv, cfg)?;
            let lambda = path.selected_lambda();
            let warm = path.selected_solution().clone();
            let mut fit = fit_projection(ds, j, lambda, &cfg.with_warm_start(warm))?;
            fit.tuning = Some(path);
            Ok(fit)
        }
        LambdaRule::Hbic { .. } => Err(EsError::InvalidArgument(
            "HBIC is defined for the quantile and ES stages only".into(),
        )),
    }
}

/// Default projection tuning: ten-fold CV with the one-SE rule.
pub fn default_projection_rule(seed: u64) -> LambdaRule {
    LambdaRule::Cv(CvConfig {
        rule: SelectionRule::Cv1se,
        seed,
        ..Default::default()
    })
}

/// ES fit with coordinate `j` held at `c0`: minimizes over θ_{−j}
/// `(2n)⁻¹Σ{Z_i(β̂) − τX_{ij}c0 − τX_{i,−j}ᵀθ_{−j}}² + τλ_e‖θ_{−j}‖₁`.
/// Returns the full-length vector with entry `j` equal to `c0`.
pub fn constrained_es_fit(
    ds: &Dataset,
    tau: QuantileLevel,
    beta_hat: &DVector<f64>,
    j: usize,
    c0: f64,
    lambda_e: f64,
    cfg: &SolverConfig,
) -> Result<CoefVector> {
    check_target(ds, j)?;
    if beta_hat.len() != ds.p() {
        return Err(EsError::DimensionMismatch(format!(
            "beta has {} entries, design {}",
            beta_hat.len(),
            ds.p()
        )));
    }
    let t = tau.value();
    let z = adjusted_responses(ds, beta_hat, tau);
    let xj = ds.col(j);
    let target = DVector::from_fn(ds.n(), |i, _| (z[i] - t * xj[i] * c0) / t);
    let x = drop_column(ds.x(), j);
    let mut weights = ds.penalty_weights();
    weights.remove(j);
    let rep = lasso_ls_fit(&x, &target, &PenaltySpec::new(lambda_e / t, weights)?, cfg)?;
    CoefVector::new(insert_entry(&rep.coefficients.values, j, c0), CoefRole::Es)
}

/// The orthogonal score
/// `S_n = n⁻¹Σ{Z_i(β) − τX_{ij}θ_j − τX_{i,−j}ᵀθ_{−j}}(X_{ij} − X_{i,−j}ᵀγ)`.
#[allow(clippy::too_many_arguments)]
pub fn score_sn(
    ds: &Dataset,
    tau: QuantileLevel,
    j: usize,
    theta_j: f64,
    theta_minus_j: &DVector<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<f64> {
    check_target(ds, j)?;
    let p = ds.p();
    if theta_minus_j.len() + 1 != p || gamma.len() + 1 != p || beta.len() != p {
        return Err(EsError::DimensionMismatch(format!(
            "score needs θ_{{−j}}, γ of length {} and β of length {p}",
            p - 1
        )));
    }
    let t = tau.value();
    let z = adjusted_responses(ds, beta, tau);
    let x_minus = drop_column(ds.x(), j);
    let xj = ds.col(j);
    let fit_rest = &x_minus * theta_minus_j;
    let proj = &x_minus * gamma;
    let n = ds.n();
    let total: f64 = (0..n)
        .map(|i| (z[i] - t * xj[i] * theta_j - t * fit_rest[i]) * (xj[i] - proj[i]))
        .sum();
    Ok(total / n as f64)
}

fn score_from_full(ds: &Dataset, tau: QuantileLevel, j: usize, theta: &DVector<f64>, beta: &DVector<f64>, proj: &ProjectionFit) -> Result<f64> {
    score_sn(ds, tau, j, theta[j], &drop_entry(theta, j), beta, &proj.gamma_hat.values)
}

/// Debiased estimate
/// `θ̃_j = θ̂_j + Σ(Ẑ_i − τX_iᵀθ̂)ω̂_i / (τ Σ X_{ij} ω̂_i)`.
pub fn debias(ds: &Dataset, tau: QuantileLevel, beta_hat: &DVector<f64>, theta_hat: &DVector<f64>, proj: &ProjectionFit) -> Result<f64> {
    let j = proj.j;
    check_target(ds, j)?;
    let t = tau.value();
    let z = adjusted_responses(ds, beta_hat, tau);
    let fitted = ds.fitted(theta_hat);
    let xj = ds.col(j);
    let w = &proj.omega_hat;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ds.n() {
        num += (z[i] - t * fitted[i]) * w[i];
        den += xj[i] * w[i];
    }
    // Cauchy–Schwarz bound on |Σ X_j ω|
    let bound = (xj.iter().map(|v| v * v).sum::<f64>() * w.norm_squared()).sqrt();
    if !(den.abs() >= 1e-12 * bound) || bound == 0.0 {
        return Err(EsError::DegenerateProjection(j));
    }
    Ok(theta_hat[j] + num / (t * den))
}

/// One-step Newton update `θ̂_j − S_n(θ̂_j)/∂_{θ_j}S_n`, with the derivative
/// taken as the exact difference of the affine score.
pub fn newton_debias(ds: &Dataset, tau: QuantileLevel, beta_hat: &DVector<f64>, theta_hat: &DVector<f64>, proj: &ProjectionFit) -> Result<f64> {
    let j = proj.j;
    let s0 = score_from_full(ds, tau, j, theta_hat, beta_hat, proj)?;
    let mut shifted = theta_hat.clone();
    shifted[j] += 1.0;
    let s1 = score_from_full(ds, tau, j, &shifted, beta_hat, proj)?;
    let slope = s1 - s0;
    if slope == 0.0 {
        return Err(EsError::DegenerateProjection(j));
    }
    Ok(theta_hat[j] - s0 / slope)
}

/// Wald interval `θ̃ ± Φ⁻¹(1−α/2)·σ̂_s/(√n·τ·σ̂_ω²)`.
pub fn wald_ci(theta_tilde: f64, sigma_s2: f64, sigma_omega2: f64, alpha: f64, n: usize, tau: f64) -> Result<(f64, f64)> {
    if !(sigma_s2 > 0.0) || !(sigma_omega2 > 0.0) {
        return Err(EsError::DegenerateVariance(format!(
            "sigma_s2 = {sigma_s2}, sigma_omega2 = {sigma_omega2}"
        )));
    }
    check_alpha(alpha)?;
    let half = normal_quantile(1.0 - alpha / 2.0) * sigma_s2.sqrt() / ((n as f64).sqrt() * tau * sigma_omega2);
    Ok((theta_tilde - half, theta_tilde + half))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EsError::InvalidArgument(format!("alpha = {alpha} not in (0, 1)")));
    }
    Ok(())
}

/// Alternative hypothesis of the score test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    #[default]
    TwoSided,
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTest {
    pub score_value: f64,
    pub test_stat: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Decision from a standardized score statistic `t = √n·S_n/σ̂_s`.
pub fn score_decision(score_value: f64, sigma_s2: f64, n: usize, alpha: f64, alt: Alternative) -> Result<ScoreTest> {
    if !(sigma_s2 > 0.0) {
        return Err(EsError::DegenerateVariance(format!("sigma_s2 = {sigma_s2}")));
    }
    check_alpha(alpha)?;
    let stat = (n as f64).sqrt() * score_value / sigma_s2.sqrt();
    let (p_value, reject) = match alt {
        Alternative::TwoSided => (
            (2.0 * (1.0 - normal_cdf(stat.abs()))).min(1.0),
            stat.abs() > normal_quantile(1.0 - alpha / 2.0),
        ),
        Alternative::Greater => (1.0 - normal_cdf(stat), stat > normal_quantile(1.0 - alpha)),
        Alternative::Less => (normal_cdf(stat), stat < normal_quantile(alpha)),
    };
    Ok(ScoreTest {
        score_value,
        test_stat: stat,
        p_value,
        reject,
    })
}

/// Score test of `H₀: θ_j = c0` with the constrained nuisance fit θ̂_{−j}(c0).
#[allow(clippy::too_many_arguments)]
pub fn score_test(
    ds: &Dataset,
    tau: QuantileLevel,
    beta_hat: &DVector<f64>,
    proj: &ProjectionFit,
    c0: f64,
    lambda_e: f64,
    sigma_s2: f64,
    alpha: f64,
    alt: Alternative,
    cfg: &SolverConfig,
) -> Result<ScoreTest> {
    let j = proj.j;
    let constrained = constrained_es_fit(ds, tau, beta_hat, j, c0, lambda_e, cfg)?;
    let s = score_from_full(ds, tau, j, &constrained.values, beta_hat, proj)?;
    score_decision(s, sigma_s2, ds.n(), alpha, alt)
}

/// How the score variance σ_s² and σ_ω² are estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Rcv,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub alpha: f64,
    /// Null value for the score test (original scale).
    pub c0: f64,
    pub alternative: Alternative,
    pub lambda_m: LambdaRule,
    pub variance: VarianceMethod,
    /// Tuning rules for the stages refitted on each half-sample.
    pub rcv_lambda_q: LambdaRule,
    pub rcv_lambda_e: LambdaRule,
    pub seed: u64,
    #[serde(skip)]
    pub solver: SolverConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            c0: 0.0,
            alternative: Alternative::TwoSided,
            lambda_m: default_projection_rule(0),
            variance: VarianceMethod::Rcv,
            rcv_lambda_q: LambdaRule::default(),
            rcv_lambda_e: LambdaRule::default(),
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

/// Per-coordinate inference record; all quantities on the original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub j: usize,
    pub name: String,
    pub theta_hat: f64,
    pub theta_tilde: f64,
    pub c0: f64,
    pub score_value: f64,
    pub sigma_s2: f64,
    pub sigma_omega2: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub alternative: Alternative,
    pub test_stat: f64,
    pub p_value: f64,
    pub reject: bool,
    /// `(λ_q, λ_e, λ_m)` on the working scale.
    pub lambdas: (f64, f64, f64),
    pub support_m: Vec<usize>,
    pub variance_method: VarianceMethod,
    pub rcv: Option<RcvEstimate>,
    pub seed: u64,
}

/// Full pipeline for coordinate `j` of a two-step fit of `ds`.
///
/// Works on the same (standardized or raw) design the fit used; estimates
/// and intervals are reported on the original scale of column `j`.
/// Upper-tail fits are handled on the sign-flipped problem and the estimate
/// and interval negated back.
pub fn infer_coordinate(ds: &Dataset, fit: &TwoStepFit, j: usize, cfg: &InferenceConfig) -> Result<InferenceResult> {
    check_target(ds, j)?;
    check_alpha(cfg.alpha)?;
    if fit.tau.tail() == Tail::Upper {
        let (flipped, lower) = upper_tail_transform(ds, fit.tau)?;
        let mut lower_fit = fit.clone();
        lower_fit.tau = lower;
        lower_fit.beta_hat = fit.beta_hat.negated();
        lower_fit.theta_hat = fit.theta_hat.negated();
        lower_fit.z_hat = -&fit.z_hat;
        lower_fit.es_residuals = -&fit.es_residuals;
        let alt = match cfg.alternative {
            Alternative::TwoSided => Alternative::TwoSided,
            Alternative::Greater => Alternative::Less,
            Alternative::Less => Alternative::Greater,
        };
        let sub = InferenceConfig {
            c0: -cfg.c0,
            alternative: alt,
            ..cfg.clone()
        };
        let mut r = infer_coordinate(&flipped, &lower_fit, j, &sub)?;
        let (lo, hi) = crate::twostep::flip_interval((r.ci_lower, r.ci_upper));
        r.theta_hat = -r.theta_hat;
        r.theta_tilde = -r.theta_tilde;
        r.c0 = cfg.c0;
        r.score_value = -r.score_value;
        r.test_stat = -r.test_stat;
        r.ci_lower = lo;
        r.ci_upper = hi;
        r.alternative = cfg.alternative;
        return Ok(r);
    }

    let info = &fit.standardization;
    let work = if info.applied { standardize(ds)?.0 } else { ds.clone() };
    let beta_w = restandardize_coefs(&fit.beta_hat, info)?.values;
    let theta_w = restandardize_coefs(&fit.theta_hat, info)?.values;
    let scale = info.scale[j];
    let tau = fit.tau;
    let solver = &cfg.solver;

    let proj = select_projection(&work, j, &cfg.lambda_m, solver)?;
    let theta_tilde_w = debias(&work, tau, &beta_w, &theta_w, &proj)?;

    let (sigma_s2_w, sigma_omega2_w, rcv) = match cfg.variance {
        VarianceMethod::Naive => {
            let (s, o) = naive_variance(&fit.es_residuals, &proj.omega_hat);
            (s, o, None)
        }
        VarianceMethod::Rcv => {
            let rc = RcvConfig {
                lambda_q: cfg.rcv_lambda_q.clone(),
                lambda_e: cfg.rcv_lambda_e.clone(),
                lambda_m: cfg.lambda_m.clone(),
                seed: cfg.seed,
                solver: solver.clone(),
            };
            let est = rcv_variance(&work, tau, j, &rc)?;
            (est.sigma_s2, est.sigma_omega2, Some(est))
        }
    };

    let test = score_test(
        &work,
        tau,
        &beta_w,
        &proj,
        cfg.c0 * scale,
        fit.lambdas.1,
        sigma_s2_w,
        cfg.alpha,
        cfg.alternative,
        solver,
    )?;
    let (lo_w, hi_w) = wald_ci(theta_tilde_w, sigma_s2_w, sigma_omega2_w, cfg.alpha, ds.n(), tau.value())?;

    Ok(InferenceResult {
        j,
        name: ds.column_name(j),
        theta_hat: fit.theta_hat.values[j],
        theta_tilde: theta_tilde_w / scale,
        c0: cfg.c0,
        score_value: test.score_value * scale,
        sigma_s2: sigma_s2_w * scale * scale,
        sigma_omega2: sigma_omega2_w * scale * scale,
        ci_lower: lo_w / scale,
        ci_upper: hi_w / scale,
        alpha: cfg.alpha,
        alternative: cfg.alternative,
        test_stat: test.test_stat,
        p_value: test.p_value,
        reject: test.reject,
        lambdas: (fit.lambdas.0, fit.lambdas.1, proj.lambda_m),
        support_m: proj.support_m.clone(),
        variance_method: cfg.variance.clone(),
        rcv,
        seed: cfg.seed,
    })
}

/// `n⁻¹Σ X_{ij}ω̂_i`: the slope of the score in θ_j divided by −τ.
pub fn projection_gram(ds: &Dataset, proj: &ProjectionFit) -> f64 {
    let xj = column(ds.x(), proj.j);
    xj.iter().zip(proj.omega_hat.iter()).map(|(a, b)| a * b).sum::<f64>() / ds.n() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twostep::{fit_es_stage, fit_two_step, TwoStepConfig};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cov = DMatrix::from_fn(n, p, |_, _| gauss(&mut rng));
        for i in 0..n {
            // correlate the first two covariates
            cov[(i, 1)] = 0.6 * cov[(i, 0)] + 0.8 * cov[(i, 1)];
        }
        let y = DVector::from_fn(n, |i, _| 1.0 + cov[(i, 0)] + cov[(i, 1)] - 0.5 * cov[(i, 2)] + gauss(&mut rng));
        Dataset::with_intercept(y, &cov).unwrap()
    }

    fn tight() -> SolverConfig {
        SolverConfig {
            tol: 1e-12,
            kkt_tol: 1e-10,
            max_iter: 100_000,
            ..Default::default()
        }
    }

    #[test]
    fn projection_residuals_recompute_exactly() {
        let ds = dataset(100, 6, 1);
        let proj = fit_projection(&ds, 2, 0.05, &SolverConfig::default()).unwrap();
        let x = drop_column(ds.x(), 2);
        let w = DVector::from_column_slice(ds.col(2)) - x * &proj.gamma_hat.values;
        assert_eq!(w, proj.omega_hat);
        assert!(proj.support_m.contains(&1));
        assert!(fit_projection(&ds, 0, 0.05, &SolverConfig::default()).is_err());
        assert!(fit_projection(&ds, 7, 0.05, &SolverConfig::default()).is_err());
    }

    #[test]
    fn fully_penalized_projection_centers_the_column() {
        let ds = dataset(80, 4, 2);
        let proj = fit_projection(&ds, 3, 1e6, &SolverConfig::default()).unwrap();
        assert!(proj.support_m.is_empty());
        let col = ds.col(3);
        let mean = col.iter().sum::<f64>() / 80.0;
        for (w, x) in proj.omega_hat.iter().zip(col) {
            assert!((w - (x - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_target_gives_near_zero_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = DMatrix::from_fn(2000, 5, |_, j| gauss(&mut rng) + if j == 3 { 4.0 } else { 0.0 });
        let ds = Dataset::with_intercept(DVector::zeros(2000), &cov).unwrap();
        let proj = fit_projection(&ds, 4, 0.05, &SolverConfig::default()).unwrap();
        let g = &proj.gamma_hat.values;
        assert!(g.rows(1, 4).amax() < 0.02, "{g}");
        assert!((g[0] - 4.0).abs() < 0.1);
    }

    #[test]
    fn score_hand_instance_and_trivial_zero() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let ds = Dataset::new(DVector::from_vec(vec![0.0, 2.0]), x, true).unwrap();
        let tau = QuantileLevel::lower(0.5).unwrap();
        let z = DVector::zeros(1);
        let s = score_sn(&ds, tau, 1, 0.0, &z, &DVector::zeros(2), &z).unwrap();
        assert_eq!(s, 0.0);
        // θ_j = 1: S = ½Σ(0 − ½x_j)(x_j) = −½
        let s = score_sn(&ds, tau, 1, 1.0, &z, &DVector::zeros(2), &z).unwrap();
        assert!((s + 0.5).abs() < 1e-15);
        // β = (1, 0): Z = (−1·1 + ½, 0 + ½) = (−½, ½); S = ½(−½·1 + ½·(−1)) = −½
        let s = score_sn(&ds, tau, 1, 0.0, &z, &DVector::from_vec(vec![1.0, 0.0]), &z).unwrap();
        assert!((s + 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_is_affine_in_theta_j() {
        for seed in 0..5 {
            let ds = dataset(60, 5, 10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tau = QuantileLevel::lower(0.3).unwrap();
            let tm = DVector::from_fn(5, |_, _| gauss(&mut rng));
            let beta = DVector::from_fn(6, |_, _| gauss(&mut rng));
            let gamma = DVector::from_fn(5, |_, _| gauss(&mut rng));
            let j = 2;
            let th: f64 = gauss(&mut rng);
            let s0 = score_sn(&ds, tau, j, 0.0, &tm, &beta, &gamma).unwrap();
            let s1 = score_sn(&ds, tau, j, th, &tm, &beta, &gamma).unwrap();
            let x_minus = drop_column(ds.x(), j);
            let w = DVector::from_column_slice(ds.col(j)) - x_minus * &gamma;
            let slope: f64 = ds.col(j).iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() * 0.3 / 60.0;
            assert!((s1 - s0 + th * slope).abs() < 1e-12 * (1.0 + s0.abs()));
        }
    }

    #[test]
    fn debias_equals_newton_step() {
        let ds = dataset(150, 8, 4);
        let tau = QuantileLevel::lower(0.2).unwrap();
        let fit = fit_two_step(&ds, tau, &TwoStepConfig::fixed(0.05, 0.1)).unwrap();
        for j in 1..4 {
            let proj = fit_projection(&ds, j, 0.05, &SolverConfig::default()).unwrap();
            let a = debias(&ds, tau, &fit.beta_hat.values, &fit.theta_hat.values, &proj).unwrap();
            let b = newton_debias(&ds, tau, &fit.beta_hat.values, &fit.theta_hat.values, &proj).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn zero_score_leaves_estimate_unchanged() {
        // unpenalized ES fit: the normal equations make every score vanish
        let ds = dataset(80, 3, 5);
        let tau = QuantileLevel::lower(0.3).unwrap();
        let beta = fit_two_step(&ds, tau, &TwoStepConfig::fixed(0.0, 0.0)).unwrap().beta_hat.values;
        let theta = fit_es_stage(&ds, tau, &beta, 0.0, &tight()).unwrap().coefficients.values;
        let proj = fit_projection(&ds, 1, 0.1, &tight()).unwrap();
        let t = debias(&ds, tau, &beta, &theta, &proj).unwrap();
        assert!((t - theta[1]).abs() < 1e-8);
    }

    #[test]
    fn degenerate_projection_is_detected() {
        // residuals orthogonal to X_j make the correction undefined
        let ds = dataset(50, 3, 6);
        let mut proj = fit_projection(&ds, 2, 0.1, &SolverConfig::default()).unwrap();
        let xj = DVector::from_column_slice(ds.col(2));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = DVector::from_fn(50, |_, _| gauss(&mut rng));
        proj.omega_hat = &v - &xj * (xj.dot(&v) / xj.norm_squared());
        let tau = QuantileLevel::lower(0.3).unwrap();
        let r = debias(&ds, tau, &DVector::zeros(4), &DVector::zeros(4), &proj);
        assert!(matches!(r, Err(EsError::DegenerateProjection(2))), "{r:?}");
        proj.omega_hat.fill(0.0);
        assert!(debias(&ds, tau, &DVector::zeros(4), &DVector::zeros(4), &proj).is_err());
    }

    #[test]
    fn wald_interval_formula() {
        let (lo, hi) = wald_ci(0.0, 1.0, 1.0, 0.05, 10_000, 0.5).unwrap();
        assert!((hi - 0.0391993).abs() < 1e-7 && (lo + hi).abs() < 1e-15);
        let (lo2, hi2) = wald_ci(0.0, 1.0, 1.0, 0.05, 20_000, 0.5).unwrap();
        assert!(((hi - lo) / (hi2 - lo2) - 2f64.sqrt()).abs() < 1e-12);
        assert!(wald_ci(0.0, 0.0, 1.0, 0.05, 10, 0.5).is_err());
        assert!(wald_ci(0.0, 1.0, -1.0, 0.05, 10, 0.5).is_err());
    }

    #[test]
    fn score_decision_thresholds() {
        // t = 1.95: σ_s = 1, n = 1, S = 1.95
        let d = score_decision(1.95, 1.0, 1, 0.05, Alternative::TwoSided).unwrap();
        assert!(!d.reject);
        let d = score_decision(1.96, 1.0, 1, 0.05, Alternative::TwoSided).unwrap();
        assert!(d.reject);
        let d = score_decision(0.0, 1.0, 100, 0.05, Alternative::TwoSided).unwrap();
        assert_eq!(d.p_value, 1.0);
        let d = score_decision(1.7, 1.0, 1, 0.05, Alternative::Greater).unwrap();
        assert!(d.reject && (d.p_value - (1.0 - normal_cdf(1.7))).abs() < 1e-15);
        assert!(score_decision(1.0, 0.0, 1, 0.05, Alternative::TwoSided).is_err());
    }

    #[test]
    fn constrained_fit_reductions() {
        let ds = dataset(90, 5, 7);
        let tau = QuantileLevel::lower(0.25).unwrap();
        let fit = fit_two_step(&ds, tau, &TwoStepConfig::fixed(0.03, 0.08)).unwrap();
        let beta = &fit.beta_hat.values;
        let cfg = tight();
        let j = 2;
        // consistency with the ES stage on the offset response
        let c0 = 0.7;
        let cons = constrained_es_fit(&ds, tau, beta, j, c0, 0.08, &cfg).unwrap();
        assert_eq!(cons.values[j], c0);
        let z = adjusted_responses(&ds, beta, tau);
        let offset = DVector::from_fn(90, |i, _| (z[i] - 0.25 * ds.col(j)[i] * c0) / 0.25);
        let mut w = ds.penalty_weights();
        w.remove(j);
        let direct = lasso_ls_fit(&drop_column(ds.x(), j), &offset, &PenaltySpec::new(0.08 / 0.25, w).unwrap(), &cfg)
            .unwrap();
        assert!((drop_entry(&cons.values, j) - direct.coefficients.values).amax() < 1e-8);

        // restricted feasible set: objective never below the unconstrained optimum
        let objective = |theta: &DVector<f64>| {
            let r = &z - ds.fitted(theta) * 0.25;
            r.norm_squared() / 180.0 + 0.25 * 0.08 * theta.rows(1, 5).abs().sum()
        };
        let free = fit_es_stage(&ds, tau, beta, 0.08, &cfg).unwrap().coefficients.values;
        let at_hat = constrained_es_fit(&ds, tau, beta, j, free[j], 0.08, &cfg).unwrap();
        assert!((objective(&at_hat.values) - objective(&free)).abs() < 1e-10);
        assert!(objective(&cons.values) >= objective(&free) - 1e-12);
    }

    #[test]
    fn constrained_fit_with_null_column_drops_it() {
        let ds = dataset(60, 4, 8);
        let mut x = ds.x().clone();
        x.column_mut(3).fill(0.0);
        let ds0 = Dataset::new(ds.y().clone(), x.clone(), true).unwrap();
        let tau = QuantileLevel::lower(0.3).unwrap();
        let beta = DVector::from_fn(5, |j, _| if j == 0 { -0.5 } else { 0.2 });
        let cons = constrained_es_fit(&ds0, tau, &beta, 3, 0.0, 0.05, &tight()).unwrap();
        let dropped = Dataset::new(ds.y().clone(), drop_column(&x, 3), true).unwrap();
        let b = drop_entry(&beta, 3);
        let direct = fit_es_stage(&dropped, tau, &b, 0.05, &tight()).unwrap();
        assert!((drop_entry(&cons.values, 3) - direct.coefficients.values).amax() < 1e-10);
    }

    #[test]
    fn triple_orthogonality_kkt_identities() {
        let ds = dataset(200, 12, 9);
        let tau = QuantileLevel::lower(0.2).unwrap();
        let (lq, le, lm) = (0.03, 0.06, 0.04);
        let mut cfg = TwoStepConfig::fixed(lq, le);
        cfg.solver = tight();
        let fit = fit_two_step(&ds, tau, &cfg).unwrap();
        let j = 1;
        let proj = fit_projection(&ds, j, lm, &tight()).unwrap();
        let n = 200.0;
        let x_minus = drop_column(ds.x(), j);
        // (a) ∂S/∂θ_{−j} = −τ n⁻¹ X_{−j}ᵀω̂: projection KKT
        let ga = x_minus.transpose() * &proj.omega_hat / n;
        let g = &proj.gamma_hat.values;
        for k in 0..ga.len() {
            if k == 0 {
                assert!(ga[k].abs() < 1e-9);
            } else if g[k] != 0.0 {
                assert!((ga[k] - lm * g[k].signum()).abs() < 1e-8);
            } else {
                assert!(ga[k].abs() <= lm + 1e-8);
            }
        }
        // (b) ∂S/∂γ = −n⁻¹ X_{−j}ᵀê: ES-stage KKT after scaling by τ
        let gb = ds.x().transpose() * &fit.es_residuals * (0.2 / n);
        let th = &fit.theta_hat.values;
        for k in 0..gb.len() {
            if k == 0 {
                assert!(gb[k].abs() < 1e-9);
            } else if th[k] != 0.0 {
                assert!((gb[k] - 0.2 * le * th[k].signum()).abs() < 1e-8);
            } else {
                assert!(gb[k].abs() <= 0.2 * le + 1e-8);
            }
        }
    }

    #[test]
    fn naive_pipeline_is_scale_consistent() {
        let ds = dataset(200, 6, 11);
        let tau = QuantileLevel::lower(0.3).unwrap();
        let cfg = InferenceConfig {
            variance: VarianceMethod::Naive,
            lambda_m: LambdaRule::Fixed(0.05),
            c0: 1.0,
            ..Default::default()
        };
        let mut tcfg = TwoStepConfig::fixed(0.02, 0.03);
        tcfg.standardize = true;
        let fit = fit_two_step(&ds, tau, &tcfg).unwrap();
        let r = infer_coordinate(&ds, &fit, 1, &cfg).unwrap();
        assert!(r.ci_lower <= r.theta_tilde && r.theta_tilde <= r.ci_upper);
        let z = normal_quantile(0.975);
        let half = z * r.sigma_s2.sqrt() / (200f64.sqrt() * 0.3 * r.sigma_omega2);
        assert!((r.ci_upper - r.theta_tilde - half).abs() < 1e-10);
        assert_eq!(r.reject, r.test_stat.abs() > z);

        // column 1 multiplied by 10: estimate and interval divide by 10
        let mut x = ds.x().clone();
        x.column_mut(1).scale_mut(10.0);
        let ds10 = Dataset::new(ds.y().clone(), x, true).unwrap();
        let fit10 = fit_two_step(&ds10, tau, &tcfg).unwrap();
        let cfg10 = InferenceConfig { c0: 0.1, ..cfg.clone() };
        let r10 = infer_coordinate(&ds10, &fit10, 1, &cfg10).unwrap();
        assert!((r10.theta_tilde * 10.0 - r.theta_tilde).abs() < 1e-6);
        assert!((r10.ci_lower * 10.0 - r.ci_lower).abs() < 1e-6);
        assert!((r10.test_stat - r.test_stat).abs() < 1e-6);
    }

    #[test]
    fn upper_tail_inference_mirrors_lower_tail() {
        let ds = dataset(200, 5, 12);
        let cfg = InferenceConfig {
            variance: VarianceMethod::Naive,
            lambda_m: LambdaRule::Fixed(0.05),
            ..Default::default()
        };
        let tcfg = TwoStepConfig::fixed(0.02, 0.03);
        let up = QuantileLevel::upper(0.8).unwrap();
        let fit_up = crate::twostep::fit_two_step_upper(&ds, up, &tcfg).unwrap();
        let r_up = infer_coordinate(&ds, &fit_up, 2, &cfg).unwrap();
        let (flipped, lo) = upper_tail_transform(&ds, up).unwrap();
        let fit_lo = fit_two_step(&flipped, lo, &tcfg).unwrap();
        let r_lo = infer_coordinate(&flipped, &fit_lo, 2, &cfg).unwrap();
        assert_eq!(r_up.theta_tilde, -r_lo.theta_tilde);
        assert_eq!((r_up.ci_lower, r_up.ci_upper), (-r_lo.ci_upper, -r_lo.ci_lower));
        assert_eq!(r_up.p_value, r_lo.p_value);
    }
}
