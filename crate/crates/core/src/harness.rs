//! Monte Carlo experiment engine: replication scheduling, comparator
//! estimators and aggregated metrics.
//!
//! Every replication draws from its own RNG stream, so records — and the
//! aggregates computed from them — do not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::inference::{default_projection_rule, infer_coordinate, InferenceConfig, VarianceMethod};
use crate::model::{adjusted_responses, CoefRole, CoefVector, Dataset, QuantileLevel};
use crate::normal::two_sided_critical;
use crate::sim::{gen_design, gen_response, projection_truth, simulate, SimScenario, SimTruth};
use crate::solvers::{least_squares, SolverConfig};
use crate::tuning::CvConfig;
use crate::twostep::{fit_two_step, refit_on_support, LambdaRule, TwoStepConfig, TwoStepFit};

pub const SCHEMA_VERSION: u32 = 1;

/// Estimators compared in an experiment. Serialized by name:
/// `two_step`, `two_step_refitted`, `two_step_oracle`, `debiased`,
/// `bootstrap(B)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    TwoStep,
    TwoStepRefitted,
    TwoStepOracle,
    Debiased,
    /// Average of `B` two-step fits on row-resampled data.
    Bootstrap(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::TwoStep => write!(f, "two_step"),
            Method::TwoStepRefitted => write!(f, "two_step_refitted"),
            Method::TwoStepOracle => write!(f, "two_step_oracle"),
            Method::Debiased => write!(f, "debiased"),
            Method::Bootstrap(b) => write!(f, "bootstrap({b})"),
        }
    }
}

impl FromStr for Method {
    type Err = EsError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Some(b) = t.strip_prefix("bootstrap(").and_then(|r| r.strip_suffix(')')) {
            return b
                .trim()
                .parse()
                .map(Method::Bootstrap)
                .map_err(|_| EsError::InvalidArgument(format!("bad bootstrap size in `{t}`")));
        }
        match t {
            "two_step" => Ok(Method::TwoStep),
            "two_step_refitted" => Ok(Method::TwoStepRefitted),
            "two_step_oracle" => Ok(Method::TwoStepOracle),
            "debiased" => Ok(Method::Debiased),
            _ => Err(EsError::InvalidArgument(format!("unknown method `{t}`"))),
        }
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = EsError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

fn default_alpha() -> f64 {
    0.05
}

fn default_workers() -> usize {
    1
}

fn default_methods() -> Vec<Method> {
    vec![Method::TwoStep]
}

fn default_lambda_m() -> LambdaRule {
    default_projection_rule(0)
}

fn default_variance() -> VarianceMethod {
    VarianceMethod::Rcv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: SimScenario,
    pub replications: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Design columns (intercept = 0) for bias, MSE and coverage.
    #[serde(default)]
    pub targets: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub lambda_q: LambdaRule,
    #[serde(default)]
    pub lambda_e: LambdaRule,
    #[serde(default = "default_lambda_m")]
    pub lambda_m: LambdaRule,
    #[serde(default = "default_variance")]
    pub variance: VarianceMethod,
    /// Base seed of the replication streams; defaults to the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Keep per-replication records in the result.
    #[serde(default)]
    pub keep_records: bool,
}

impl ExperimentConfig {
    pub fn new(scenario: SimScenario, replications: usize, methods: Vec<Method>) -> Self {
        Self {
            scenario,
            replications,
            methods,
            targets: Vec::new(),
            alpha: default_alpha(),
            lambda_q: LambdaRule::default(),
            lambda_e: LambdaRule::default(),
            lambda_m: default_lambda_m(),
            variance: default_variance(),
            seed: None,
            workers: default_workers(),
            keep_records: false,
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.seed.unwrap_or(self.scenario.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.replications < 1 {
            return Err(EsError::InvalidArgument("replications must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(EsError::InvalidArgument("no methods requested".into()));
        }
        if self.methods.iter().any(|m| matches!(m, Method::Bootstrap(0))) {
            return Err(EsError::InvalidArgument("bootstrap needs B >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EsError::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(&j) = self.targets.iter().find(|&&j| j == 0 || j > self.scenario.p) {
            return Err(EsError::InvalidArgument(format!(
                "target {j} must be a covariate column in 1..={}",
                self.scenario.p
            )));
        }
        if self.methods.contains(&Method::Debiased) && self.targets.is_empty() {
            return Err(EsError::InvalidArgument("the debiased method needs inference targets".into()));
        }
        if self.workers < 1 {
            return Err(EsError::InvalidArgument("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// One estimator's output on one target coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub j: usize,
    pub estimate: f64,
    pub truth: f64,
    pub ci: Option<(f64, f64)>,
    /// Standard error implied by the interval.
    pub se: Option<f64>,
}

impl TargetRecord {
    pub fn covered(&self) -> Option<bool> {
        self.ci.map(|(a, b)| a <= self.truth && self.truth <= b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    /// Whole-vector metrics; absent for the debiased single-coordinate method.
    pub error_p: Option<f64>,
    pub error_fp: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub targets: Vec<TargetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: u64,
    pub methods: Vec<MethodRecord>,
    pub lambdas: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: u64,
    pub reason: String,
}

/// Aggregated metrics of one method (and target, when targets are set),
/// each with its Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub target: Option<usize>,
    pub replications: usize,
    pub error_p: Option<f64>,
    pub error_p_se: Option<f64>,
    pub error_fp: Option<f64>,
    pub error_fp_se: Option<f64>,
    pub tpr: Option<f64>,
    pub tpr_se: Option<f64>,
    pub fpr: Option<f64>,
    pub fpr_se: Option<f64>,
    pub bias: Option<f64>,
    pub bias_se: Option<f64>,
    pub mse: Option<f64>,
    pub mse_se: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<Failure>,
    /// Failure counts keyed by reason.
    pub failure_counts: BTreeMap<String, usize>,
    pub records: Option<Vec<ReplicationRecord>>,
}

impl ExperimentResult {
    pub fn row(&self, method: Method, target: Option<usize>) -> Option<&MetricsRow> {
        let name = method.to_string();
        self.rows.iter().find(|r| r.method == name && r.target == target)
    }
}

/// Relative ℓ2 errors on the true support and on its complement, with the
/// intercept (column 0) excluded from both.
pub fn support_errors(estimate: &DVector<f64>, truth: &SimTruth) -> (f64, f64) {
    let norm = truth.theta_star.norm();
    let mut on = 0.0;
    let mut off = 0.0;
    for j in 1..estimate.len() {
        let d = estimate[j] - truth.theta_star[j];
        if truth.theta_star[j] != 0.0 {
            on += d * d;
        } else {
            off += d * d;
        }
    }
    (on.sqrt() / norm, off.sqrt() / norm)
}

/// True and false positive rates of a selected support (non-intercept
/// indices) against the true ES support.
pub fn selection_rates(selected: &[usize], truth: &SimTruth) -> (f64, f64) {
    let p = truth.theta_star.len() - 1;
    let s = truth.support_e();
    let tp = selected.iter().filter(|j| s.contains(j)).count();
    let fp = selected.iter().filter(|&&j| j > 0).count() - tp;
    let tpr = if s.is_empty() { 1.0 } else { tp as f64 / s.len() as f64 };
    let fpr = if p == s.len() { 0.0 } else { fp as f64 / (p - s.len()) as f64 };
    (tpr, fpr)
}

/// Unpenalized least squares of `Z(β*)` on `τX` restricted to the intercept
/// and the true ES support.
pub fn oracle_two_step(ds: &Dataset, tau: QuantileLevel, truth: &SimTruth) -> Result<CoefVector> {
    if truth.beta_star.len() != ds.p() {
        return Err(EsError::DimensionMismatch(format!(
            "truth has {} coefficients, design {}",
            truth.beta_star.len(),
            ds.p()
        )));
    }
    let mut cols: Vec<usize> = (0..ds.offset()).collect();
    cols.extend(truth.support_e());
    let t = tau.value();
    let z = adjusted_responses(ds, &truth.beta_star, tau) / t;
    let xs = ds.x().select_columns(cols.iter());
    let coef = least_squares(&xs, &z)?;
    let mut theta = DVector::zeros(ds.p());
    for (k, &j) in cols.iter().enumerate() {
        theta[j] = coef[k];
    }
    CoefVector::new(theta, CoefRole::Es)
}

/// Average of two-step fits on the given row resamples.
pub fn bootstrap_on_indices(
    ds: &Dataset,
    tau: QuantileLevel,
    resamples: &[Vec<usize>],
    cfg: &TwoStepConfig,
) -> Result<CoefVector> {
    if resamples.is_empty() {
        return Err(EsError::InvalidArgument("bootstrap needs B >= 1".into()));
    }
    let mut sum = DVector::zeros(ds.p());
    for idx in resamples {
        let boot = ds.subset_rows(idx)?;
        sum += fit_two_step(&boot, tau, cfg)?.theta_hat.values;
    }
    CoefVector::new(sum / resamples.len() as f64, CoefRole::Es)
}

/// Average of `b` two-step fits on nonparametric bootstrap samples drawn
/// with a ChaCha generator seeded by `seed`. The penalty levels come from
/// `cfg` (typically fixed at the original data's choice).
pub fn bootstrap_estimator(
    ds: &Dataset,
    tau: QuantileLevel,
    b: usize,
    seed: u64,
    cfg: &TwoStepConfig,
) -> Result<CoefVector> {
    let n = ds.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resamples: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect();
    bootstrap_on_indices(ds, tau, &resamples, cfg)
}

/// Replaces the fold seed of a cross-validated rule.
fn reseed(rule: &LambdaRule, seed: u64) -> LambdaRule {
    match rule {
        LambdaRule::Cv(cv) => LambdaRule::Cv(CvConfig { seed, ..cv.clone() }),
        other => other.clone(),
    }
}

fn target_records(estimate: &DVector<f64>, truth: &SimTruth, targets: &[usize]) -> Vec<TargetRecord> {
    targets
        .iter()
        .map(|&j| TargetRecord {
            j,
            estimate: estimate[j],
            truth: truth.theta_star[j],
            ci: None,
            se: None,
        })
        .collect()
}

fn vector_record(method: Method, est: &DVector<f64>, selected: &[usize], truth: &SimTruth, targets: &[usize]) -> MethodRecord {
    let (ep, efp) = support_errors(est, truth);
    let (tpr, fpr) = selection_rates(selected, truth);
    MethodRecord {
        method,
        error_p: Some(ep),
        error_fp: Some(efp),
        tpr: Some(tpr),
        fpr: Some(fpr),
        targets: target_records(est, truth, targets),
    }
}

fn nonzero_covariates(v: &DVector<f64>) -> Vec<usize> {
    (1..v.len()).filter(|&j| v[j] != 0.0).collect()
}

/// Runs every requested method on replication `rep`.
pub fn run_replication(cfg: &ExperimentConfig, truth: &SimTruth, rep: u64) -> Result<ReplicationRecord> {
    let mut scenario = cfg.scenario.clone();
    scenario.seed = cfg.base_seed();
    let sim = simulate(&scenario, truth, rep)?;
    let ds = &sim.data;
    let tau = scenario.level();
    let fit_cfg = TwoStepConfig {
        lambda_q: reseed(&cfg.lambda_q, sim.fold_seed),
        lambda_e: reseed(&cfg.lambda_e, sim.fold_seed),
        solver: SolverConfig::default(),
        standardize: scenario.standardize,
    };
    let needs_fit = cfg.methods.iter().any(|m| *m != Method::TwoStepOracle);
    let fit: Option<TwoStepFit> = if needs_fit { Some(fit_two_step(ds, tau, &fit_cfg)?) } else { None };

    let mut methods = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let record = match method {
            Method::TwoStep => {
                let f = fit.as_ref().expect("fit computed");
                vector_record(method, &f.theta_hat.values, &f.support_e, truth, &cfg.targets)
            }
            Method::TwoStepRefitted => {
                let f = fit.as_ref().expect("fit computed");
                let refit = refit_on_support(ds, f)?;
                vector_record(method, &refit.values, &f.support_e, truth, &cfg.targets)
            }
            Method::TwoStepOracle => {
                let oracle = oracle_two_step(ds, tau, truth)?;
                vector_record(method, &oracle.values, &truth.support_e(), truth, &cfg.targets)
            }
            Method::Bootstrap(b) => {
                let f = fit.as_ref().expect("fit computed");
                let boot_cfg = TwoStepConfig {
                    lambda_q: LambdaRule::Fixed(f.lambdas.0),
                    lambda_e: LambdaRule::Fixed(f.lambdas.1),
                    ..fit_cfg.clone()
                };
                let avg = bootstrap_estimator(ds, tau, b, sim.aux_seed, &boot_cfg)?;
                let sel = nonzero_covariates(&avg.values);
                vector_record(method, &avg.values, &sel, truth, &cfg.targets)
            }
            Method::Debiased => {
                let f = fit.as_ref().expect("fit computed");
                let inf_cfg = InferenceConfig {
                    alpha: cfg.alpha,
                    lambda_m: reseed(&cfg.lambda_m, sim.fold_seed),
                    variance: cfg.variance.clone(),
                    rcv_lambda_q: fit_cfg.lambda_q.clone(),
                    rcv_lambda_e: fit_cfg.lambda_e.clone(),
                    seed: sim.split_seed,
                    ..Default::default()
                };
                let z = two_sided_critical(cfg.alpha);
                let mut targets = Vec::with_capacity(cfg.targets.len());
                for &j in &cfg.targets {
                    let res = infer_coordinate(ds, f, j, &inf_cfg)?;
                    targets.push(TargetRecord {
                        j,
                        estimate: res.theta_tilde,
                        truth: truth.theta_star[j],
                        ci: Some((res.ci_lower, res.ci_upper)),
                        se: Some((res.ci_upper - res.ci_lower) / (2.0 * z)),
                    });
                }
                MethodRecord {
                    method,
                    error_p: None,
                    error_fp: None,
                    tpr: None,
                    fpr: None,
                    targets,
                }
            }
        };
        methods.push(record);
    }
    Ok(ReplicationRecord {
        rep,
        methods,
        lambdas: fit.map(|f| f.lambdas),
    })
}

/// Short, stable failure category used for counting.
fn failure_reason(e: &EsError) -> String {
    match e {
        EsError::RcvCardinality { .. } => "rcv_cardinality".into(),
        EsError::NonConvergence(_) => "non_convergence".into(),
        EsError::RankDeficient(_) => "rank_deficient".into(),
        EsError::DegenerateProjection(_) => "degenerate_projection".into(),
        EsError::DegenerateVariance(_) => "degenerate_variance".into(),
        EsError::SupportCapExceeded(_) => "support_cap_exceeded".into(),
        EsError::CrossValidation(_) => "cross_validation".into(),
        other => format!("other: {other}"),
    }
}

/// Runs all replications on a pool of `cfg.workers` threads and aggregates.
/// Failed replications are excluded and counted; more than 5% failures is
/// an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let truth = cfg.scenario.truth()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| EsError::Experiment(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<ReplicationRecord>> = pool.install(|| {
        (0..cfg.replications as u64)
            .into_par_iter()
            .map(|rep| run_replication(cfg, &truth, rep))
            .collect()
    });
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    let mut failure_counts = BTreeMap::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => records.push(r),
            Err(e) => {
                warn!("replication {rep} failed: {e}");
                *failure_counts.entry(failure_reason(&e)).or_insert(0) += 1;
                failures.push(Failure {
                    rep: rep as u64,
                    reason: e.to_string(),
                });
            }
        }
    }
    if failures.len() * 20 > cfg.replications {
        return Err(EsError::Experiment(format!(
            "{} of {} replications failed: {failure_counts:?}",
            failures.len(),
            cfg.replications
        )));
    }
    let rows = aggregate(&records, &cfg.methods, &cfg.targets);
    Ok(ExperimentResult {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        seed: cfg.base_seed(),
        rows,
        failures,
        failure_counts,
        records: cfg.keep_records.then_some(records),
    })
}

/// Mean and Monte Carlo standard error.
fn mean_se(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let m = v.len() as f64;
    let mu = v.iter().sum::<f64>() / m;
    let se = if v.len() > 1 {
        (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    (Some(mu), Some(se))
}

/// Aggregates per-replication records into one row per method (and target).
/// Pure: the rows are a function of the records alone.
pub fn aggregate(records: &[ReplicationRecord], methods: &[Method], targets: &[usize]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for &method in methods {
        let recs: Vec<&MethodRecord> = records
            .iter()
            .filter_map(|r| r.methods.iter().find(|m| m.method == method))
            .collect();
        let col = |f: &dyn Fn(&MethodRecord) -> Option<f64>| -> Vec<f64> { recs.iter().filter_map(|r| f(r)).collect() };
        let (error_p, error_p_se) = mean_se(&col(&|r| r.error_p));
        let (error_fp, error_fp_se) = mean_se(&col(&|r| r.error_fp));
        let (tpr, tpr_se) = mean_se(&col(&|r| r.tpr));
        let (fpr, fpr_se) = mean_se(&col(&|r| r.fpr));
        let base = MetricsRow {
            method: method.to_string(),
            target: None,
            replications: recs.len(),
            error_p,
            error_p_se,
            error_fp,
            error_fp_se,
            tpr,
            tpr_se,
            fpr,
            fpr_se,
            bias: None,
            bias_se: None,
            mse: None,
            mse_se: None,
            coverage: None,
            coverage_se: None,
        };
        if targets.is_empty() {
            rows.push(base);
            continue;
        }
        for &j in targets {
            let tr: Vec<&TargetRecord> = recs
                .iter()
                .filter_map(|r| r.targets.iter().find(|t| t.j == j))
                .collect();
            let err: Vec<f64> = tr.iter().map(|t| t.estimate - t.truth).collect();
            let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
            let cov: Vec<f64> = tr
                .iter()
                .filter_map(|t| t.covered())
                .map(|c| if c { 1.0 } else { 0.0 })
                .collect();
            let (bias, bias_se) = mean_se(&err);
            let (mse, mse_se) = mean_se(&sq);
            let (coverage, coverage_se) = mean_se(&cov);
            rows.push(MetricsRow {
                target: Some(j),
                bias,
                bias_se,
                mse,
                mse_se,
                coverage,
                coverage_se,
                ..base.clone()
            });
        }
    }
    rows
}

/// Kolmogorov–Smirnov statistic `sup |F_n − F|` of a sample against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the one-sample KS test (Kolmogorov distribution
/// with Stephens' small-sample correction).
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Population `(σ_s², σ_ω²)` for coordinate `j` approximated with the true
/// `β*`, `θ*` and `γ*` on `n_ref` fresh draws, generated in chunks so memory
/// stays bounded.
pub fn oracle_variance_reference(scenario: &SimScenario, j: usize, n_ref: usize, seed: u64) -> Result<(f64, f64)> {
    scenario.validate()?;
    let truth = scenario.truth()?;
    let gamma = projection_truth(scenario.p, scenario.design, j)?;
    let tau = scenario.level();
    let t = tau.value();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = 20_000usize;
    let (mut s_sum, mut w_sum) = (0.0, 0.0);
    let mut done = 0usize;
    while done < n_ref {
        let m = chunk.min(n_ref - done);
        let cov = gen_design(m, scenario.p, scenario.design, &mut rng);
        let mut x = DMatrix::from_element(m, scenario.p + 1, 1.0);
        x.columns_mut(1, scenario.p).copy_from(&cov);
        let y = gen_response(&x, &truth, &mut rng)?;
        let ds = Dataset::new(y, x, true)?;
        let z = adjusted_responses(&ds, &truth.beta_star, tau);
        let xt = ds.fitted(&truth.theta_star);
        for i in 0..m {
            let mut omega = ds.x()[(i, j)];
            for k in 0..scenario.p {
                omega -= ds.x()[(i, crate::inference::full_index(k, j))] * gamma[k];
            }
            let e = z[i] - t * xt[i];
            s_sum += omega * omega * e * e;
            w_sum += omega * omega;
        }
        done += m;
    }
    let nf = n_ref as f64;
    Ok((s_sum / nf, w_sum / nf))
}

/// Writes one CSV row per method (× target).
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format per-replication estimates and intervals:
/// `rep,method,target,estimate,truth,ci_lower,ci_upper,covered`.
pub fn write_long_csv<W: Write>(records: &[ReplicationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "method", "target", "estimate", "truth", "ci_lower", "ci_upper", "covered"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in records {
        for m in &r.methods {
            for t in &m.targets {
                w.write_record([
                    r.rep.to_string(),
                    m.method.to_string(),
                    t.j.to_string(),
                    format!("{}", t.estimate),
                    format!("{}", t.truth),
                    opt(t.ci.map(|c| c.0)),
                    opt(t.ci.map(|c| c.1)),
                    t.covered().map(|c| c.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
