use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::Path;

use esreg::harness::{write_long_csv, write_metrics_csv, ExperimentConfig, Method, SCHEMA_VERSION};
use esreg::ingest::{read_csv, write_csv, Ingested};
use esreg::sim::simulate;
use esreg::{fit_two_step_any, infer_coordinate, rcv_variance, run_experiment, standardize, RcvConfig, TwoStepFit};
use serde::Serialize;

use crate::args::{DataArgs, FormatArg, InferArgs, SimArgs};
use crate::config::{resolve, resolve_data, rule_for, CliError, CliResult, Resolved};

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    seed: u64,
    config: &'a C,
    result: &'a R,
}

fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<C: Serialize, R: Serialize>(out: Option<&Path>, command: &str, seed: u64, config: &C, result: &R) -> CliResult<()> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        seed,
        config,
        result,
    };
    let mut w = open_output(out)?;
    serde_json::to_writer_pretty(&mut w, &env).map_err(|e| CliError::input(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

/// CSV output: `#`-prefixed provenance lines, then the table.
fn write_csv_rows<C: Serialize, R: Serialize>(out: Option<&Path>, command: &str, seed: u64, config: &C, rows: &[R]) -> CliResult<()> {
    let mut w = open_output(out)?;
    writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(w, "# command={command}")?;
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "# config={}", serde_json::to_string(config).map_err(|e| CliError::input(e.to_string()))?)?;
    let mut cw = csv::Writer::from_writer(w);
    for r in rows {
        cw.serialize(r).map_err(|e| CliError::input(e.to_string()))?;
    }
    cw.flush()?;
    Ok(())
}

fn emit<R: Serialize, Row: Serialize>(cfg: &Resolved, out: Option<&Path>, result: &R, rows: &[Row]) -> CliResult<()> {
    match cfg.format {
        FormatArg::Json => write_json(out, &cfg.command, cfg.seed, cfg, result),
        FormatArg::Csv => write_csv_rows(out, &cfg.command, cfg.seed, cfg, rows),
    }
}

fn load(cfg: &Resolved) -> CliResult<Ingested> {
    let file = File::open(&cfg.input).map_err(|e| CliError::input(format!("{}: {e}", cfg.input.display())))?;
    Ok(read_csv(BufReader::new(file), &cfg.ingest_options())?)
}

fn fit(cfg: &Resolved, data: &Ingested) -> CliResult<TwoStepFit> {
    Ok(fit_two_step_any(&data.dataset, cfg.level()?, &cfg.two_step())?)
}

fn names_of(data: &Ingested, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&j| data.dataset.column_name(j)).collect()
}

#[derive(Serialize)]
struct FitReport {
    response: String,
    n: usize,
    p: usize,
    columns: Vec<String>,
    beta_hat: Vec<f64>,
    theta_hat: Vec<f64>,
    support_q: Vec<String>,
    support_e: Vec<String>,
    lambda_q: f64,
    lambda_e: f64,
    standardization: esreg::StandardizationInfo,
    diagnostics: esreg::twostep::TwoStepDiagnostics,
}

#[derive(Serialize)]
struct CoefRow {
    column: String,
    beta_hat: f64,
    theta_hat: f64,
    selected_q: bool,
    selected_e: bool,
}

fn fit_report(data: &Ingested, f: &TwoStepFit) -> FitReport {
    let ds = &data.dataset;
    FitReport {
        response: data.response_name.clone(),
        n: ds.n(),
        p: ds.p(),
        columns: (0..ds.p()).map(|j| ds.column_name(j)).collect(),
        beta_hat: f.beta_hat.values.iter().copied().collect(),
        theta_hat: f.theta_hat.values.iter().copied().collect(),
        support_q: names_of(data, &f.support_q),
        support_e: names_of(data, &f.support_e),
        lambda_q: f.lambdas.0,
        lambda_e: f.lambdas.1,
        standardization: f.standardization.clone(),
        diagnostics: f.diagnostics.clone(),
    }
}

pub fn cmd_fit(args: &DataArgs) -> CliResult<()> {
    let cfg = resolve_data("fit", args)?;
    let data = load(&cfg)?;
    let f = fit(&cfg, &data)?;
    let report = fit_report(&data, &f);
    let rows: Vec<CoefRow> = (0..report.p)
        .map(|j| CoefRow {
            column: report.columns[j].clone(),
            beta_hat: report.beta_hat[j],
            theta_hat: report.theta_hat[j],
            selected_q: f.support_q.contains(&j),
            selected_e: f.support_e.contains(&j),
        })
        .collect();
    emit(&cfg, args.out.as_deref(), &report, &rows)
}

fn targets(cfg: &Resolved, data: &Ingested) -> CliResult<Vec<usize>> {
    if cfg.targets.is_empty() {
        return Err(CliError::input("--target is required"));
    }
    let mut out = Vec::new();
    for t in &cfg.targets {
        for j in data.resolve_columns(t)? {
            if j < data.dataset.offset() {
                return Err(CliError::input("the intercept cannot be a target"));
            }
            if !out.contains(&j) {
                out.push(j);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct InferRow {
    column: String,
    j: usize,
    theta_hat: f64,
    theta_tilde: f64,
    ci_lower: f64,
    ci_upper: f64,
    alpha: f64,
    c0: f64,
    score_value: f64,
    test_stat: f64,
    p_value: f64,
    reject: bool,
    sigma_s2: f64,
    sigma_omega2: f64,
    lambda_q: f64,
    lambda_e: f64,
    lambda_m: f64,
}

pub fn cmd_infer(args: &InferArgs) -> CliResult<()> {
    let cfg = resolve("infer", args)?;
    let data = load(&cfg)?;
    let js = targets(&cfg, &data)?;
    let f = fit(&cfg, &data)?;
    let icfg = cfg.inference();
    let mut results = Vec::with_capacity(js.len());
    for &j in &js {
        results.push(infer_coordinate(&data.dataset, &f, j, &icfg)?);
    }
    let rows: Vec<InferRow> = results
        .iter()
        .map(|r| InferRow {
            column: r.name.clone(),
            j: r.j,
            theta_hat: r.theta_hat,
            theta_tilde: r.theta_tilde,
            ci_lower: r.ci_lower,
            ci_upper: r.ci_upper,
            alpha: r.alpha,
            c0: r.c0,
            score_value: r.score_value,
            test_stat: r.test_stat,
            p_value: r.p_value,
            reject: r.reject,
            sigma_s2: r.sigma_s2,
            sigma_omega2: r.sigma_omega2,
            lambda_q: r.lambdas.0,
            lambda_e: r.lambdas.1,
            lambda_m: r.lambdas.2,
        })
        .collect();
    emit(&cfg, args.data.out.as_deref(), &results, &rows)
}

#[derive(Serialize)]
struct PathRow {
    stage: String,
    index: usize,
    lambda: f64,
    score: Option<f64>,
    se: Option<f64>,
    support_size: usize,
    selected: bool,
}

#[derive(Serialize)]
struct TuneReport {
    lambda_q: f64,
    lambda_e: f64,
    path_q: Option<esreg::LambdaPath>,
    path_e: Option<esreg::LambdaPath>,
}

pub fn cmd_tune(args: &DataArgs) -> CliResult<()> {
    let cfg = resolve_data("tune", args)?;
    let data = load(&cfg)?;
    let f = fit(&cfg, &data)?;
    let mut rows = Vec::new();
    for path in [&f.tuning_q, &f.tuning_e].into_iter().flatten() {
        for (i, &lambda) in path.grid.iter().enumerate() {
            rows.push(PathRow {
                stage: path.stage.clone(),
                index: i,
                lambda,
                score: path.scores.get(i).copied(),
                se: path.se.get(i).copied(),
                support_size: path.support_size[i],
                selected: i == path.selected,
            });
        }
    }
    let report = TuneReport {
        lambda_q: f.lambdas.0,
        lambda_e: f.lambdas.1,
        path_q: f.tuning_q,
        path_e: f.tuning_e,
    };
    emit(&cfg, args.out.as_deref(), &report, &rows)
}

#[derive(Serialize)]
struct RcvRow {
    column: String,
    j: usize,
    sigma_s2: f64,
    sigma_omega2: f64,
    sigma_s2_half1: f64,
    sigma_s2_half2: f64,
    sigma_omega2_half1: f64,
    sigma_omega2_half2: f64,
}

#[derive(Serialize)]
struct RcvReport {
    column: String,
    j: usize,
    /// Variances are on the working (standardized when enabled) scale.
    standardized: bool,
    estimate: esreg::RcvEstimate,
}

pub fn cmd_rcv(args: &InferArgs) -> CliResult<()> {
    let cfg = resolve("rcv", args)?;
    let data = load(&cfg)?;
    let js = targets(&cfg, &data)?;
    let level = cfg.level()?;
    let (work, lower) = match level.tail() {
        esreg::Tail::Lower => (data.dataset.clone(), level),
        esreg::Tail::Upper => esreg::twostep::upper_tail_transform(&data.dataset, level)?,
    };
    let work = if cfg.standardize { standardize(&work)?.0 } else { work };
    let ts = cfg.two_step();
    let rcfg = RcvConfig {
        lambda_q: ts.lambda_q,
        lambda_e: ts.lambda_e,
        lambda_m: cfg.inference().lambda_m,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for &j in &js {
        reports.push(RcvReport {
            column: data.dataset.column_name(j),
            j,
            standardized: cfg.standardize,
            estimate: rcv_variance(&work, lower, j, &rcfg)?,
        });
    }
    let rows: Vec<RcvRow> = reports
        .iter()
        .map(|r| RcvRow {
            column: r.column.clone(),
            j: r.j,
            sigma_s2: r.estimate.sigma_s2,
            sigma_omega2: r.estimate.sigma_omega2,
            sigma_s2_half1: r.estimate.half_estimates[0],
            sigma_s2_half2: r.estimate.half_estimates[1],
            sigma_omega2_half1: r.estimate.half_estimates[2],
            sigma_omega2_half2: r.estimate.half_estimates[3],
        })
        .collect();
    emit(&cfg, args.data.out.as_deref(), &reports, &rows)
}

pub fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn cmd_simulate(args: &SimArgs) -> CliResult<()> {
    let mut cfg = load_experiment(&args.scenario)?;
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if !args.methods.is_empty() {
        cfg.methods = args.methods.iter().map(|m| m.parse::<Method>()).collect::<Result<_, _>>()?;
    }
    if let Some(rule) = args.rule {
        cfg.lambda_q = rule_for(rule, 10, 0);
        cfg.lambda_e = rule_for(rule, 10, 0);
    }
    if args.long.is_some() {
        cfg.keep_records = true;
    }
    cfg.validate()?;

    if let Some(path) = &args.export {
        let mut scenario = cfg.scenario.clone();
        scenario.seed = cfg.base_seed();
        let truth = scenario.truth()?;
        let rep = simulate(&scenario, &truth, args.export_rep)?;
        let w = open_output(Some(path))?;
        write_csv(&rep.data, "y", w)?;
        return Ok(());
    }

    let result = run_experiment(&cfg)?;
    if let (Some(path), Some(records)) = (&args.long, &result.records) {
        write_long_csv(records, open_output(Some(path))?)?;
    }
    match args.format.unwrap_or(FormatArg::Json) {
        FormatArg::Json => write_json(args.out.as_deref(), "simulate", result.seed, &cfg, &result),
        FormatArg::Csv => {
            let mut w = open_output(args.out.as_deref())?;
            writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
            writeln!(w, "# command=simulate")?;
            writeln!(w, "# seed={}", result.seed)?;
            writeln!(w, "# config={}", serde_json::to_string(&cfg).map_err(|e| CliError::input(e.to_string()))?)?;
            write_metrics_csv(&result.rows, w)?;
            Ok(())
        }
    }
}
