//! Seeded simulation designs and their exact ground truth.
//!
//! Responses follow `y = Xζ* + (Xη*)ξ` with `ξ ~ N(0,1)`. The homogeneous
//! model `y = Xζ* + ξ` is the special case `η* = e₀` (intercept only).
//! Column 0 of every simulated design is the intercept.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::model::{Dataset, QuantileLevel};
use crate::normal::{normal_quantile, normal_tail_es};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    /// `X_ij = |z_ij|`, `z ~ N(0, I)`.
    #[serde(rename = "abs_normal_identity")]
    AbsNormalIdentity,
    /// `X_ij = |z_ij|`, `z ~ N(0, Σ)`, `Σ_jk = 0.8^{|j−k|}`.
    #[serde(rename = "abs_normal_ar08")]
    AbsNormalAr08,
    /// `X_ij ~ Uniform(0, 1.5)`.
    #[serde(rename = "uniform_0_1p5")]
    Uniform01p5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseModel {
    #[default]
    Heteroscedastic,
    Homogeneous,
}

fn default_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// A simulation setting. `p` counts covariates; simulated datasets carry an
/// extra intercept column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub tau: f64,
    pub design: Design,
    #[serde(default)]
    pub model: ResponseModel,
    #[serde(default = "default_scale")]
    pub signal_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Whether fits on this scenario standardize the covariates.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(EsError::InvalidArgument(format!("need n >= 2 and p >= 1, got n = {}, p = {}", self.n, self.p)));
        }
        if self.s > self.p {
            return Err(EsError::InvalidArgument(format!("s = {} exceeds p = {}", self.s, self.p)));
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return Err(EsError::InvalidArgument(format!("signal_scale = {}", self.signal_scale)));
        }
        QuantileLevel::lower(self.tau)?;
        Ok(())
    }

    pub fn level(&self) -> QuantileLevel {
        QuantileLevel::lower(self.tau).expect("validated scenario")
    }

    pub fn truth(&self) -> Result<SimTruth> {
        make_truth(self.p, self.s, self.tau, self.signal_scale, self.model)
    }
}

/// True coefficients, indexed like the design (entry 0 is the intercept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub zeta_star: DVector<f64>,
    pub eta_star: DVector<f64>,
    /// `ζ* + η*·Q_τ(ξ)`.
    pub beta_star: DVector<f64>,
    /// `ζ* + η*·S_τ(ξ)`.
    pub theta_star: DVector<f64>,
    pub quantile: f64,
    pub shortfall: f64,
}

impl SimTruth {
    /// Non-intercept support of θ*.
    pub fn support_e(&self) -> Vec<usize> {
        (1..self.theta_star.len()).filter(|&j| self.theta_star[j] != 0.0).collect()
    }
}

/// Coefficient recipe: ζ*_j = 2c for j ≤ ⌈s/2⌉ and c for ⌈s/2⌉ < j ≤ s;
/// η*_j = 1/3 for j ≤ ⌈s/2⌉ (heteroscedastic) or η* = e₀ (homogeneous).
pub fn make_truth(p: usize, s: usize, tau: f64, c: f64, model: ResponseModel) -> Result<SimTruth> {
    if s > p {
        return Err(EsError::InvalidArgument(format!("s = {s} exceeds p = {p}")));
    }
    let q = normal_quantile(tau);
    let es = normal_tail_es(tau)?;
    let half = s.div_ceil(2);
    let zeta = DVector::from_fn(p + 1, |j, _| match j {
        0 => 0.0,
        j if j <= half => 2.0 * c,
        j if j <= s => c,
        _ => 0.0,
    });
    let eta = DVector::from_fn(p + 1, |j, _| match model {
        ResponseModel::Heteroscedastic if (1..=half).contains(&j) => 1.0 / 3.0,
        ResponseModel::Homogeneous if j == 0 => 1.0,
        _ => 0.0,
    });
    Ok(SimTruth {
        beta_star: &zeta + &eta * q,
        theta_star: &zeta + &eta * es,
        zeta_star: zeta,
        eta_star: eta,
        quantile: q,
        shortfall: es,
    })
}

const AR_RHO: f64 = 0.8;

/// Latent Gaussian rows before folding: i.i.d. for the identity design and
/// the stationary AR(1) recursion `z_j = ρz_{j−1} + √(1−ρ²)e_j` (the
/// Cholesky factor of `ρ^{|j−k|}` applied to white noise) otherwise.
pub fn gen_latent_normals(n: usize, p: usize, design: Design, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, p);
    let innov = (1.0 - AR_RHO * AR_RHO).sqrt();
    for i in 0..n {
        let mut prev = 0.0;
        for j in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            let v = match design {
                Design::AbsNormalAr08 if j > 0 => AR_RHO * prev + innov * e,
                _ => e,
            };
            z[(i, j)] = v;
            prev = v;
        }
    }
    z
}

/// `n × p` covariate matrix (without intercept).
pub fn gen_design(n: usize, p: usize, design: Design, rng: &mut impl Rng) -> DMatrix<f64> {
    match design {
        Design::Uniform01p5 => {
            let u = Uniform::new(0.0, 1.5).expect("valid range");
            let mut x = DMatrix::zeros(n, p);
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = rng.sample(u);
                }
            }
            x
        }
        _ => gen_latent_normals(n, p, design, rng).map(f64::abs),
    }
}

/// `y_i = X_iᵀζ* + (X_iᵀη*)ξ_i` on a design with intercept.
pub fn gen_response(ds_x: &DMatrix<f64>, truth: &SimTruth, rng: &mut impl Rng) -> Result<DVector<f64>> {
    if ds_x.ncols() != truth.zeta_star.len() {
        return Err(EsError::DimensionMismatch(format!(
            "design has {} columns, truth {}",
            ds_x.ncols(),
            truth.zeta_star.len()
        )));
    }
    let loc = ds_x * &truth.zeta_star;
    let scale = ds_x * &truth.eta_star;
    let mut y = DVector::zeros(ds_x.nrows());
    for i in 0..ds_x.nrows() {
        if !(scale[i] > 0.0) {
            return Err(EsError::InvalidArgument(format!(
                "nonpositive noise scale {} at row {i}",
                scale[i]
            )));
        }
        let xi: f64 = rng.sample(StandardNormal);
        y[i] = loc[i] + scale[i] * xi;
    }
    Ok(y)
}

/// Generator for replication `rep` of a run seeded with `seed`: an
/// independent ChaCha stream, so results do not depend on scheduling.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// One simulated replication: the dataset and seeds for its CV folds and
/// sample split, all drawn from the replication stream.
#[derive(Debug, Clone)]
pub struct Replication {
    pub data: Dataset,
    pub fold_seed: u64,
    pub split_seed: u64,
    pub aux_seed: u64,
}

pub fn simulate(scenario: &SimScenario, truth: &SimTruth, rep: u64) -> Result<Replication> {
    scenario.validate()?;
    let mut rng = replication_rng(scenario.seed, rep);
    let cov = gen_design(scenario.n, scenario.p, scenario.design, &mut rng);
    let mut x = DMatrix::from_element(scenario.n, scenario.p + 1, 1.0);
    x.columns_mut(1, scenario.p).copy_from(&cov);
    let y = gen_response(&x, truth, &mut rng)?;
    Ok(Replication {
        data: Dataset::new(y, x, true)?,
        fold_seed: rng.next_u64(),
        split_seed: rng.next_u64(),
        aux_seed: rng.next_u64(),
    })
}

/// Population second moments `E[X Xᵀ]` of a design with intercept.
pub fn design_second_moments(p: usize, design: Design) -> DMatrix<f64> {
    let two_over_pi = 2.0 / std::f64::consts::PI;
    let (mean, sq) = match design {
        Design::Uniform01p5 => (0.75, 0.75),
        _ => (two_over_pi.sqrt(), 1.0),
    };
    DMatrix::from_fn(p + 1, p + 1, |a, b| match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => mean,
        (a, b) if a == b => sq,
        (a, b) => match design {
            Design::AbsNormalAr08 => {
                // E|z_j||z_k| for a standard bivariate normal with correlation ρ
                let rho = AR_RHO.powi((a as i32 - b as i32).abs());
                two_over_pi * ((1.0 - rho * rho).sqrt() + rho * rho.asin())
            }
            _ => mean * mean,
        },
    })
}

/// Population projection `γ* = E[X₋ⱼX₋ⱼᵀ]⁻¹E[X₋ⱼX_j]` (length p, intercept first).
pub fn projection_truth(p: usize, design: Design, j: usize) -> Result<DVector<f64>> {
    if j == 0 || j > p {
        return Err(EsError::InvalidArgument(format!("projection target {j} out of 1..={p}")));
    }
    let m = design_second_moments(p, design);
    let rest: Vec<usize> = (0..=p).filter(|&k| k != j).collect();
    let a = DMatrix::from_fn(p, p, |r, c| m[(rest[r], rest[c])]);
    let b = DVector::from_fn(p, |r, _| m[(rest[r], j)]);
    a.cholesky()
        .map(|ch| ch.solve(&b))
        .ok_or(EsError::RankDeficient(p))
}
