//! CSV ingestion with dummy expansion of categorical columns, and export.
//!
//! A column is numeric when every non-missing entry parses as a number;
//! otherwise it is categorical and expands to one indicator per level except
//! the baseline (lexicographically first unless overridden). Missing entries
//! (empty or `NA`) form their own `NA` level in categorical columns and are
//! an error in numeric columns and in the response.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::model::Dataset;

pub const NA_LEVEL: &str = "NA";
pub const INTERCEPT_NAME: &str = "(intercept)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseTransform {
    #[default]
    None,
    /// Natural log; requires a positive response.
    Log,
    /// `ln(1 + y)`; requires `y > −1`.
    Log1p,
}

impl ResponseTransform {
    fn apply(self, y: f64) -> Option<f64> {
        match self {
            ResponseTransform::None => Some(y),
            ResponseTransform::Log => (y > 0.0).then(|| y.ln()),
            ResponseTransform::Log1p => (y > -1.0).then(|| y.ln_1p()),
        }
    }
}

/// Which column is the response and how the others are treated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Header name, or a 0-based column index when no header matches.
    pub response: String,
    /// Columns forced to be categorical even if they parse as numbers.
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Baseline level per categorical column.
    #[serde(default)]
    pub baselines: BTreeMap<String, String>,
    /// Columns to leave out of the design.
    #[serde(default)]
    pub drop: Vec<String>,
    #[serde(default)]
    pub transform: ResponseTransform,
    #[serde(default = "yes")]
    pub intercept: bool,
}

fn yes() -> bool {
    true
}

impl IngestOptions {
    pub fn new(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            categorical: Vec::new(),
            baselines: BTreeMap::new(),
            drop: Vec::new(),
            transform: ResponseTransform::None,
            intercept: true,
        }
    }
}

/// A categorical source column and the indicator columns it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DummyGroup {
    pub source: String,
    pub baseline: String,
    /// `(level, design column)`.
    pub levels: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub dataset: Dataset,
    pub response_name: String,
    pub dummies: Vec<DummyGroup>,
}

impl Ingested {
    /// Design columns for a name: a plain column, an expanded categorical
    /// (all its indicators), or a 0-based/1-based index written as a number.
    pub fn resolve_columns(&self, spec: &str) -> Result<Vec<usize>> {
        let names = self.dataset.column_names().unwrap_or(&[]);
        if let Some(j) = names.iter().position(|n| n == spec) {
            return Ok(vec![j]);
        }
        if let Some(g) = self.dummies.iter().find(|g| g.source == spec) {
            return Ok(g.levels.iter().map(|(_, j)| *j).collect());
        }
        if let Ok(j) = spec.parse::<usize>() {
            if j < self.dataset.p() {
                return Ok(vec![j]);
            }
        }
        Err(EsError::InvalidArgument(format!("unknown column `{spec}`")))
    }
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == NA_LEVEL
}

fn input_err(line: usize, column: usize, message: impl Into<String>) -> EsError {
    EsError::Input {
        line,
        column,
        message: message.into(),
    }
}

/// Reads a headed CSV into a dataset. Column order is preserved; each
/// categorical column is replaced by its indicators, levels sorted.
pub fn read_csv<R: Read>(input: R, opts: &IngestOptions) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() {
        return Err(input_err(1, 1, "empty header"));
    }
    let resp = match headers.iter().position(|h| *h == opts.response) {
        Some(k) => k,
        None => match opts.response.parse::<usize>() {
            Ok(k) if k < headers.len() => k,
            _ => {
                return Err(input_err(
                    1,
                    1,
                    format!("response column `{}` not found in header", opts.response),
                ))
            }
        },
    };
    for name in opts.categorical.iter().chain(&opts.drop).chain(opts.baselines.keys()) {
        if !headers.contains(name) {
            return Err(input_err(1, 1, format!("unknown column `{name}` in options")));
        }
    }

    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(cells.len() + 2);
        if rec.len() != headers.len() {
            return Err(input_err(
                line,
                rec.len().min(headers.len()) + 1,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        cells.push(rec.iter().map(|s| s.trim().to_string()).collect());
        lines.push(line);
    }
    let n = cells.len();
    if n < 2 {
        return Err(input_err(1, 1, format!("need at least 2 data rows, found {n}")));
    }

    let mut y = Vec::with_capacity(n);
    for (i, row) in cells.iter().enumerate() {
        let raw = &row[resp];
        if is_missing(raw) {
            return Err(input_err(lines[i], resp + 1, "missing response"));
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| input_err(lines[i], resp + 1, format!("response `{raw}` is not a number")))?;
        let t = opts.transform.apply(v).ok_or_else(|| {
            input_err(lines[i], resp + 1, format!("response {v} outside the domain of {:?}", opts.transform))
        })?;
        y.push(t);
    }

    let mut names: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut dummies = Vec::new();
    if opts.intercept {
        names.push(INTERCEPT_NAME.to_string());
        columns.push(vec![1.0; n]);
    }
    for (k, h) in headers.iter().enumerate() {
        if k == resp || opts.drop.contains(h) {
            continue;
        }
        let forced = opts.categorical.contains(h);
        let parsed: Option<Vec<Option<f64>>> = if forced {
            None
        } else {
            cells
                .iter()
                .map(|r| if is_missing(&r[k]) { Some(None) } else { r[k].parse::<f64>().ok().map(Some) })
                .collect()
        };
        match parsed {
            Some(vals) => {
                let mut col = Vec::with_capacity(n);
                for (i, v) in vals.into_iter().enumerate() {
                    match v {
                        Some(x) if x.is_finite() => col.push(x),
                        Some(x) => return Err(input_err(lines[i], k + 1, format!("non-finite value {x} in `{h}`"))),
                        None => return Err(input_err(lines[i], k + 1, format!("missing value in numeric column `{h}`"))),
                    }
                }
                names.push(h.clone());
                columns.push(col);
            }
            None => {
                let level_of = |r: &Vec<String>| -> String {
                    if is_missing(&r[k]) {
                        NA_LEVEL.to_string()
                    } else {
                        r[k].clone()
                    }
                };
                let levels: BTreeSet<String> = cells.iter().map(level_of).collect();
                let baseline = match opts.baselines.get(h) {
                    Some(b) if levels.contains(b) => b.clone(),
                    Some(b) => {
                        return Err(input_err(1, k + 1, format!("baseline `{b}` is not a level of `{h}`")))
                    }
                    None => levels.iter().next().cloned().unwrap_or_default(),
                };
                let mut group = DummyGroup {
                    source: h.clone(),
                    baseline: baseline.clone(),
                    levels: Vec::new(),
                };
                for level in levels.iter().filter(|l| **l != baseline) {
                    group.levels.push((level.clone(), columns.len()));
                    names.push(format!("{h}={level}"));
                    columns.push(cells.iter().map(|r| f64::from(level_of(r) == *level)).collect());
                }
                dummies.push(group);
            }
        }
    }
    if columns.is_empty() {
        return Err(input_err(1, 1, "no covariate columns"));
    }
    let p = columns.len();
    let x = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
    let dataset = Dataset::new(DVector::from_vec(y), x, opts.intercept)?.with_column_names(names)?;
    Ok(Ingested {
        dataset,
        response_name: headers[resp].clone(),
        dummies,
    })
}

/// Writes the response and the non-intercept columns with a header; values
/// use shortest round-trip formatting, so re-reading gives identical data.
pub fn write_csv<W: Write>(ds: &Dataset, response_name: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let cols: Vec<usize> = (ds.offset()..ds.p()).collect();
    let mut header = vec![response_name.to_string()];
    header.extend(cols.iter().map(|&j| ds.column_name(j)));
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row = vec![format!("{}", ds.y()[i])];
        row.extend(cols.iter().map(|&j| format!("{}", ds.x()[(i, j)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
