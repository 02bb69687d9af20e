//! The two-step estimator: penalized quantile regression, adjusted
//! responses, then penalized least squares of the adjusted responses.

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::model::{
    adjusted_responses, destandardize_coefs, standardize, CoefRole, CoefVector, Dataset,
    QuantileLevel, StandardizationInfo, Tail,
};
use crate::solvers::{lasso_ls_fit, sqr_fit, PenaltySpec, SolveReport, SolverConfig};
use crate::tuning::{compute_path_capped, cv_select, hbic_e, hbic_q, CvConfig, HbicConfig, LambdaPath, Stage};

/// How a stage's penalty level is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    Fixed(f64),
    Cv(CvConfig),
    Hbic {
        grid_len: usize,
        min_ratio: f64,
        #[serde(default)]
        constants: HbicConfig,
    },
}

impl LambdaRule {
    pub fn hbic() -> Self {
        LambdaRule::Hbic {
            grid_len: 50,
            min_ratio: 0.01,
            constants: HbicConfig::default(),
        }
    }
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Cv(CvConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepConfig {
    pub lambda_q: LambdaRule,
    pub lambda_e: LambdaRule,
    #[serde(skip)]
    pub solver: SolverConfig,
    /// Fit on centered and scaled covariates, reporting coefficients on the
    /// original scale.
    pub standardize: bool,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        Self {
            lambda_q: LambdaRule::default(),
            lambda_e: LambdaRule::default(),
            solver: SolverConfig::default(),
            standardize: true,
        }
    }
}

impl TwoStepConfig {
    pub fn fixed(lambda_q: f64, lambda_e: f64) -> Self {
        Self {
            lambda_q: LambdaRule::Fixed(lambda_q),
            lambda_e: LambdaRule::Fixed(lambda_e),
            standardize: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TwoStepDiagnostics {
    /// Number of observations with `y_i ≤ X_iᵀβ̂`.
    pub exceedances: usize,
    pub converged_q: bool,
    pub converged_e: bool,
    pub iterations_q: usize,
    pub iterations_e: usize,
    pub kkt_q: f64,
    pub kkt_e: f64,
    pub bandwidth: Option<f64>,
    pub warnings: Vec<String>,
}

/// Result of the two-step fit. Coefficients are on the scale of the dataset
/// passed in; `z_hat` and `es_residuals` do not depend on standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepFit {
    pub tau: QuantileLevel,
    pub beta_hat: CoefVector,
    pub theta_hat: CoefVector,
    pub z_hat: DVector<f64>,
    /// `Ẑ_i − τ X_iᵀθ̂`.
    pub es_residuals: DVector<f64>,
    pub support_q: Vec<usize>,
    pub support_e: Vec<usize>,
    /// `(λ_q, λ_e)` on the scale the stages were solved on.
    pub lambdas: (f64, f64),
    pub tuning_q: Option<LambdaPath>,
    pub tuning_e: Option<LambdaPath>,
    pub diagnostics: TwoStepDiagnostics,
    pub standardization: StandardizationInfo,
}

fn require_lower(tau: QuantileLevel) -> Result<()> {
    match tau.tail() {
        Tail::Lower => Ok(()),
        Tail::Upper => Err(EsError::InvalidArgument(
            "upper-tail levels go through fit_two_step_upper".into(),
        )),
    }
}

/// Penalized quantile stage with the intercept unpenalized.
pub fn fit_quantile_stage(
    ds: &Dataset,
    tau: QuantileLevel,
    lambda_q: f64,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let pen = PenaltySpec::new(lambda_q, ds.penalty_weights())?;
    let mut rep = sqr_fit(ds.x(), ds.y(), tau, &pen, cfg)?;
    rep.coefficients.role = CoefRole::Quantile;
    Ok(rep)
}

/// ES stage: minimizes `(2n)⁻¹Σ(Z_i(β̂) − τX_iᵀθ)² + τλ_e‖θ‖₁` (intercept
/// unpenalized). Dividing by τ² gives the lasso of `Z/τ` on `X` at `λ_e/τ`;
/// the reported objective and KKT violation are mapped back to this scale.
pub fn fit_es_stage(
    ds: &Dataset,
    tau: QuantileLevel,
    beta_hat: &DVector<f64>,
    lambda_e: f64,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if beta_hat.len() != ds.p() {
        return Err(EsError::DimensionMismatch(format!(
            "beta has {} entries, design {}",
            beta_hat.len(),
            ds.p()
        )));
    }
    if !(lambda_e >= 0.0 && lambda_e.is_finite()) {
        return Err(EsError::InvalidArgument(format!("lambda_e = {lambda_e}")));
    }
    let t = tau.value();
    let z = adjusted_responses(ds, beta_hat, tau) / t;
    let pen = PenaltySpec::new(lambda_e / t, ds.penalty_weights())?;
    let mut rep = lasso_ls_fit(ds.x(), &z, &pen, cfg)?;
    rep.objective *= t * t;
    rep.kkt_violation *= t * t;
    for v in rep.trace.iter_mut() {
        *v *= t * t;
    }
    rep.coefficients.role = CoefRole::Es;
    Ok(rep)
}

fn resolve_lambda(
    ds: &Dataset,
    tau: QuantileLevel,
    stage: &Stage,
    rule: &LambdaRule,
    cfg: &SolverConfig,
) -> Result<(f64, Option<LambdaPath>, Option<DVector<f64>>)> {
    match rule {
        LambdaRule::Fixed(l) => Ok((*l, None, None)),
        LambdaRule::Cv(cv) => {
            let path = cv_select(ds, stage, tau, cv, cfg)?;
            let warm = path.selected_solution().clone();
            Ok((path.selected_lambda(), Some(path), Some(warm)))
        }
        LambdaRule::Hbic {
            grid_len,
            min_ratio,
            constants,
        } => {
            // points beyond the support cap are ineligible; twice the cap
            // leaves room for a non-monotone path
            let (_, _, cap) = constants.resolve(ds.n(), ds.p());
            let path = compute_path_capped(ds, stage, tau, *grid_len, *min_ratio, 2 * cap, cfg)?;
            let path = match stage {
                Stage::Quantile => hbic_q(ds, tau, &path, constants)?,
                Stage::Es { beta, .. } => hbic_e(ds, tau, beta, &path, constants)?,
                Stage::Projection { .. } => {
                    return Err(EsError::InvalidArgument(
                        "HBIC is defined for the quantile and ES stages only".into(),
                    ))
                }
            };
            let warm = path.selected_solution().clone();
            Ok((path.selected_lambda(), Some(path), Some(warm)))
        }
    }
}

fn with_warm(cfg: &SolverConfig, warm: Option<DVector<f64>>) -> SolverConfig {
    match warm {
        Some(w) => cfg.with_warm_start(w),
        None => cfg.clone(),
    }
}

/// Two-step fit at a lower-tail level.
pub fn fit_two_step(ds: &Dataset, tau: QuantileLevel, cfg: &TwoStepConfig) -> Result<TwoStepFit> {
    require_lower(tau)?;
    let (work, info) = if cfg.standardize {
        standardize(ds)?
    } else {
        (ds.clone(), StandardizationInfo::identity(ds.p()))
    };
    let solver = &cfg.solver;

    let (lambda_q, tuning_q, warm) = resolve_lambda(&work, tau, &Stage::Quantile, &cfg.lambda_q, solver)?;
    let rep_q = fit_quantile_stage(&work, tau, lambda_q, &with_warm(solver, warm))?;
    let beta_w = rep_q.coefficients.values.clone();

    let stage_e = Stage::Es {
        beta: beta_w.clone(),
        refit_lambda_q: Some(lambda_q),
    };
    let (lambda_e, tuning_e, warm) = resolve_lambda(&work, tau, &stage_e, &cfg.lambda_e, solver)?;
    let rep_e = fit_es_stage(&work, tau, &beta_w, lambda_e, &with_warm(solver, warm))?;
    let theta_w = rep_e.coefficients.values.clone();

    let z_hat = adjusted_responses(&work, &beta_w, tau);
    let es_residuals = &z_hat - work.fitted(&theta_w) * tau.value();
    let fitted_q = work.fitted(&beta_w);
    let exceedances = ds.y().iter().zip(fitted_q.iter()).filter(|(y, f)| y <= f).count();

    let mut warnings = Vec::new();
    if exceedances == 0 {
        let msg = "no observation lies at or below the fitted quantile; the ES stage reduces to the quantile fit".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }
    for (name, rep) in [("quantile", &rep_q), ("es", &rep_e)] {
        if !rep.converged {
            let msg = format!(
                "{name} stage stopped after {} iterations (kkt {:.2e})",
                rep.iterations, rep.kkt_violation
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }

    let beta_hat = destandardize_coefs(&rep_q.coefficients, &info)?;
    let theta_hat = destandardize_coefs(&rep_e.coefficients, &info)?;
    let off = ds.offset();
    Ok(TwoStepFit {
        tau,
        support_q: beta_hat.support(off),
        support_e: theta_hat.support(off),
        beta_hat,
        theta_hat,
        z_hat,
        es_residuals,
        lambdas: (lambda_q, lambda_e),
        tuning_q,
        tuning_e,
        diagnostics: TwoStepDiagnostics {
            exceedances,
            converged_q: rep_q.converged,
            converged_e: rep_e.converged,
            iterations_q: rep_q.iterations,
            iterations_e: rep_e.iterations,
            kkt_q: rep_q.kkt_violation,
            kkt_e: rep_e.kkt_violation,
            bandwidth: rep_q.bandwidth,
            warnings,
        },
        standardization: info,
    })
}

/// Maps an upper-tail problem to the equivalent lower-tail one
/// (`y ↦ −y`, level `τ ↦ 1 − τ`) and back; applying it twice is the identity.
pub fn upper_tail_transform(ds: &Dataset, tau: QuantileLevel) -> Result<(Dataset, QuantileLevel)> {
    let flipped = ds.with_response(-ds.y())?;
    let tail = match tau.tail() {
        Tail::Lower => Tail::Upper,
        Tail::Upper => Tail::Lower,
    };
    Ok((flipped, QuantileLevel::new(1.0 - tau.value(), tail)?))
}

/// Interval for `−θ` given an interval `[a, b]` for `θ`.
pub fn flip_interval((a, b): (f64, f64)) -> (f64, f64) {
    (-b, -a)
}

/// Two-step fit at an upper-tail level: fits the lower tail of `−y` at
/// `1 − τ` and negates coefficients, adjusted responses and residuals.
pub fn fit_two_step_upper(ds: &Dataset, tau: QuantileLevel, cfg: &TwoStepConfig) -> Result<TwoStepFit> {
    if tau.tail() != Tail::Upper {
        return Err(EsError::InvalidArgument("expected an upper-tail level".into()));
    }
    let (flipped, lower) = upper_tail_transform(ds, tau)?;
    let mut fit = fit_two_step(&flipped, lower, cfg)?;
    fit.tau = tau;
    fit.beta_hat = fit.beta_hat.negated();
    fit.theta_hat = fit.theta_hat.negated();
    fit.z_hat = -fit.z_hat;
    fit.es_residuals = -fit.es_residuals;
    Ok(fit)
}

/// Dispatches on the tail of `tau`.
pub fn fit_two_step_any(ds: &Dataset, tau: QuantileLevel, cfg: &TwoStepConfig) -> Result<TwoStepFit> {
    match tau.tail() {
        Tail::Lower => fit_two_step(ds, tau, cfg),
        Tail::Upper => fit_two_step_upper(ds, tau, cfg),
    }
}

/// Unpenalized least squares of `Ẑ` on `τX` restricted to the intercept and
/// `Ŝ_e`; zeros elsewhere.
pub fn refit_on_support(ds: &Dataset, fit: &TwoStepFit) -> Result<CoefVector> {
    let mut cols: Vec<usize> = (0..ds.offset()).collect();
    cols.extend(fit.support_e.iter().copied());
    if cols.len() + 1 > ds.n() {
        return Err(EsError::RankDeficient(cols.len()));
    }
    let sign = match fit.tau.tail() {
        Tail::Lower => 1.0,
        Tail::Upper => -1.0,
    };
    // for upper-tail fits z_hat is stored negated; solve on the lower-tail scale
    let t = match fit.tau.tail() {
        Tail::Lower => fit.tau.value(),
        Tail::Upper => 1.0 - fit.tau.value(),
    };
    let mut theta = DVector::zeros(ds.p());
    if !cols.is_empty() {
        let xs = ds.x().select_columns(cols.iter());
        let target = &fit.z_hat * (sign / t);
        let coef = crate::solvers::least_squares(&xs, &target)?;
        for (k, &j) in cols.iter().enumerate() {
            theta[j] = sign * coef[k];
        }
    }
    CoefVector::new(theta, CoefRole::Es)
}
