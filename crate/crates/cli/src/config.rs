//! Merging flags with `--config` files into one resolved, serializable
//! configuration, and mapping errors to exit codes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use esreg::ingest::{IngestOptions, ResponseTransform};
use esreg::inference::default_projection_rule;
use esreg::{
    Alternative, CvConfig, EsError, InferenceConfig, LambdaRule, QuantileLevel, SelectionRule, Tail,
    TwoStepConfig, VarianceMethod,
};
use serde::Serialize;

use crate::args::{AltArg, DataArgs, FileConfig, FormatArg, InferArgs, RuleArg, Switch, TailArg, TransformArg, VarianceArg};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_INFERENCE: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<EsError> for CliError {
    fn from(e: EsError) -> Self {
        let code = match &e {
            EsError::NonConvergence(_)
            | EsError::RankDeficient(_)
            | EsError::CrossValidation(_)
            | EsError::SupportCapExceeded(_)
            | EsError::Experiment(_) => EXIT_SOLVER,
            EsError::RcvCardinality { .. } | EsError::DegenerateProjection(_) | EsError::DegenerateVariance(_) => {
                EXIT_INFERENCE
            }
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Every option after merging flags, the config file and defaults. Embedded
/// verbatim in every output.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub command: String,
    pub input: PathBuf,
    pub response: String,
    pub tau: f64,
    pub tail: TailArg,
    pub rule: RuleArg,
    pub folds: usize,
    pub seed: u64,
    pub standardize: bool,
    pub lambda_q: Option<f64>,
    pub lambda_e: Option<f64>,
    pub categorical: Vec<String>,
    pub baselines: BTreeMap<String, String>,
    pub drop: Vec<String>,
    pub transform: TransformArg,
    pub format: FormatArg,
    pub targets: Vec<String>,
    pub alpha: f64,
    pub c0: f64,
    pub alternative: AltArg,
    pub variance: VarianceArg,
}

fn load_file(path: &Option<PathBuf>) -> CliResult<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))
        }
    }
}

fn pick_vec(flag: &[String], file: Vec<String>) -> Vec<String> {
    if flag.is_empty() {
        file
    } else {
        flag.to_vec()
    }
}

pub fn resolve_data(command: &str, d: &DataArgs) -> CliResult<Resolved> {
    resolve(command, &InferArgs { data: d.clone(), ..Default::default() })
}

pub fn resolve(command: &str, a: &InferArgs) -> CliResult<Resolved> {
    let d = &a.data;
    let f = load_file(&d.config)?;
    let input = d
        .input
        .clone()
        .or(f.input)
        .ok_or_else(|| CliError::input("--input is required"))?;
    let response = d
        .response
        .clone()
        .or(f.response)
        .ok_or_else(|| CliError::input("--response is required"))?;
    let mut baselines = BTreeMap::new();
    for b in pick_vec(&d.baseline, f.baseline) {
        let (col, level) = b
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("--baseline expects column=level, got `{b}`")))?;
        baselines.insert(col.to_string(), level.to_string());
    }
    let r = Resolved {
        command: command.to_string(),
        input,
        response,
        tau: d.tau.or(f.tau).ok_or_else(|| CliError::input("--tau is required"))?,
        tail: d.tail.or(f.tail).unwrap_or(TailArg::Lower),
        rule: d.rule.or(f.rule).unwrap_or(RuleArg::Cv),
        folds: d.folds.or(f.folds).unwrap_or(10),
        seed: d.seed.or(f.seed).unwrap_or(0),
        standardize: d.standardize.or(f.standardize).unwrap_or(Switch::On) == Switch::On,
        lambda_q: d.lambda_q.or(f.lambda_q),
        lambda_e: d.lambda_e.or(f.lambda_e),
        categorical: pick_vec(&d.categorical, f.categorical),
        baselines,
        drop: pick_vec(&d.drop, f.drop),
        transform: d.transform.or(f.transform).unwrap_or(TransformArg::None),
        format: d.format.or(f.format).unwrap_or(FormatArg::Json),
        targets: pick_vec(&a.target, f.target),
        alpha: a.alpha.or(f.alpha).unwrap_or(0.05),
        c0: a.c0.or(f.c0).unwrap_or(0.0),
        alternative: a.alternative.or(f.alternative).unwrap_or(AltArg::TwoSided),
        variance: a.variance.or(f.variance).unwrap_or(VarianceArg::Rcv),
    };
    r.level()?;
    if !(r.alpha > 0.0 && r.alpha < 1.0) {
        return Err(CliError::input(format!("--alpha must lie in (0, 1), got {}", r.alpha)));
    }
    if r.folds < 2 {
        return Err(CliError::input("--folds must be at least 2"));
    }
    Ok(r)
}

pub fn rule_for(rule: RuleArg, folds: usize, seed: u64) -> LambdaRule {
    match rule {
        RuleArg::Cv => LambdaRule::Cv(CvConfig {
            folds,
            seed,
            rule: SelectionRule::CvMin,
            ..Default::default()
        }),
        RuleArg::Cv1se => LambdaRule::Cv(CvConfig {
            folds,
            seed,
            rule: SelectionRule::Cv1se,
            ..Default::default()
        }),
        RuleArg::Hbic => LambdaRule::hbic(),
    }
}

impl Resolved {
    pub fn level(&self) -> CliResult<QuantileLevel> {
        let tail = match self.tail {
            TailArg::Lower => Tail::Lower,
            TailArg::Upper => Tail::Upper,
        };
        Ok(QuantileLevel::new(self.tau, tail)?)
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            response: self.response.clone(),
            categorical: self.categorical.clone(),
            baselines: self.baselines.clone(),
            drop: self.drop.clone(),
            transform: match self.transform {
                TransformArg::None => ResponseTransform::None,
                TransformArg::Log => ResponseTransform::Log,
                TransformArg::Log1p => ResponseTransform::Log1p,
            },
            intercept: true,
        }
    }

    fn stage_rule(&self, fixed: Option<f64>) -> LambdaRule {
        match fixed {
            Some(l) => LambdaRule::Fixed(l),
            None => rule_for(self.rule, self.folds, self.seed),
        }
    }

    pub fn two_step(&self) -> TwoStepConfig {
        TwoStepConfig {
            lambda_q: self.stage_rule(self.lambda_q),
            lambda_e: self.stage_rule(self.lambda_e),
            standardize: self.standardize,
            ..Default::default()
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        let ts = self.two_step();
        let proj = match default_projection_rule(self.seed) {
            LambdaRule::Cv(cv) => LambdaRule::Cv(CvConfig { folds: self.folds, ..cv }),
            other => other,
        };
        InferenceConfig {
            alpha: self.alpha,
            c0: self.c0,
            alternative: match self.alternative {
                AltArg::TwoSided => Alternative::TwoSided,
                AltArg::Greater => Alternative::Greater,
                AltArg::Less => Alternative::Less,
            },
            lambda_m: proj,
            variance: match self.variance {
                VarianceArg::Rcv => VarianceMethod::Rcv,
                VarianceArg::Naive => VarianceMethod::Naive,
            },
            rcv_lambda_q: ts.lambda_q,
            rcv_lambda_e: ts.lambda_e,
            seed: self.seed,
            ..Default::default()
        }
    }
}
