//! Shared model types: datasets, quantile levels, coefficient vectors, the
//! check loss and the adjusted response used by both estimation stages.
//!
//! Column 0 of a design with an intercept is the constant column; coordinate
//! `j` of every coefficient vector refers to column `j` of the design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};

/// Which tail of the conditional distribution an ES level refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    #[default]
    Lower,
    Upper,
}

/// A quantile level in the open unit interval together with its tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevel {
    tau: f64,
    tail: Tail,
}

impl QuantileLevel {
    pub fn new(tau: f64, tail: Tail) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(EsError::InvalidQuantileLevel(tau));
        }
        Ok(Self { tau, tail })
    }

    pub fn lower(tau: f64) -> Result<Self> {
        Self::new(tau, Tail::Lower)
    }

    pub fn upper(tau: f64) -> Result<Self> {
        Self::new(tau, Tail::Upper)
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.tau
    }

    #[inline]
    pub fn tail(&self) -> Tail {
        self.tail
    }
}

/// What a coefficient vector estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefRole {
    Quantile,
    Es,
    Projection,
}

/// A finite coefficient vector tagged with its role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefVector {
    pub values: DVector<f64>,
    pub role: CoefRole,
}

impl CoefVector {
    pub fn new(values: DVector<f64>, role: CoefRole) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EsError::InvalidArgument(format!(
                "coefficient {i} is not finite"
            )));
        }
        Ok(Self { values, role })
    }

    pub fn zeros(len: usize, role: CoefRole) -> Self {
        Self {
            values: DVector::zeros(len),
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices of nonzero coordinates, skipping the first `skip` entries.
    pub fn support(&self, skip: usize) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .skip(skip)
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn negated(&self) -> Self {
        Self {
            values: -&self.values,
            role: self.role,
        }
    }
}

/// Response vector and dense design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    has_intercept: bool,
    column_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, has_intercept: bool) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 {
            return Err(EsError::InvalidDataset(format!("need n >= 2, got {n}")));
        }
        if p < 1 {
            return Err(EsError::InvalidDataset("design has no columns".into()));
        }
        if y.len() != n {
            return Err(EsError::InvalidDataset(format!(
                "response has {} entries but design has {n} rows",
                y.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(EsError::InvalidDataset(format!(
                "response entry {i} is not finite"
            )));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(EsError::InvalidDataset(format!(
                "design entry (row {}, column {}) is not finite",
                k % n,
                k / n
            )));
        }
        if has_intercept && x.column(0).iter().any(|&v| v != 1.0) {
            return Err(EsError::InvalidDataset(
                "intercept column 0 must be all ones".into(),
            ));
        }
        Ok(Self {
            y,
            x,
            has_intercept,
            column_names: None,
        })
    }

    /// Builds a dataset from covariates by prepending a column of ones.
    pub fn with_intercept(y: DVector<f64>, covariates: &DMatrix<f64>) -> Result<Self> {
        let n = covariates.nrows();
        let x = covariates.clone().insert_column(0, 1.0);
        debug_assert_eq!(x.nrows(), n);
        Self::new(y, x, true)
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(EsError::DimensionMismatch(format!(
                "{} column names for {} columns",
                names.len(),
                self.p()
            )));
        }
        self.column_names = Some(names);
        Ok(self)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    #[inline]
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    #[inline]
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    #[inline]
    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    pub fn column_name(&self, j: usize) -> String {
        match &self.column_names {
            Some(names) => names[j].clone(),
            None if self.has_intercept && j == 0 => "(intercept)".to_string(),
            None => format!("x{j}"),
        }
    }

    /// Contiguous view of column `j` (storage is column-major).
    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        column(&self.x, j)
    }

    /// Per-coordinate penalty weights: 0 on the intercept, 1 elsewhere.
    pub fn penalty_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.p()];
        if self.has_intercept {
            w[0] = 0.0;
        }
        w
    }

    /// Number of leading unpenalized coordinates (1 with intercept, else 0).
    pub fn offset(&self) -> usize {
        usize::from(self.has_intercept)
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset_rows(&self, idx: &[usize]) -> Result<Self> {
        let p = self.p();
        let x = DMatrix::from_fn(idx.len(), p, |i, j| self.x[(idx[i], j)]);
        let y = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        let mut ds = Self::new(y, x, self.has_intercept)?;
        ds.column_names = self.column_names.clone();
        Ok(ds)
    }

    /// Same design with a different response.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(EsError::DimensionMismatch(format!(
                "response length {} != n {}",
                y.len(),
                self.n()
            )));
        }
        Ok(Self {
            y,
            x: self.x.clone(),
            has_intercept: self.has_intercept,
            column_names: self.column_names.clone(),
        })
    }

    pub fn fitted(&self, coefs: &DVector<f64>) -> DVector<f64> {
        &self.x * coefs
    }
}

/// Contiguous slice of column `j` of a column-major matrix.
#[inline]
pub fn column(x: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = x.nrows();
    &x.as_slice()[j * n..(j + 1) * n]
}

/// Design with column `j` removed.
pub fn drop_column(x: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    x.clone().remove_column(j)
}

/// Vector with entry `j` removed.
pub fn drop_entry(v: &DVector<f64>, j: usize) -> DVector<f64> {
    v.clone().remove_row(j)
}

/// Vector with `value` inserted at position `j`.
pub fn insert_entry(v: &DVector<f64>, j: usize, value: f64) -> DVector<f64> {
    v.clone().insert_row(j, value)
}

/// Quantile check loss `ρ_τ(u) = (τ − 1{u < 0}) u`.
#[inline]
pub fn check_loss(tau: QuantileLevel, u: f64) -> f64 {
    check_loss_raw(tau.value(), u)
}

#[inline]
pub(crate) fn check_loss_raw(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// Adjusted response `(y − xb)·1{y ≤ xb} + τ·xb`. Ties fire the indicator.
#[inline]
pub fn adjusted_response(y: f64, xb: f64, tau: QuantileLevel) -> f64 {
    adjusted_response_raw(y, xb, tau.value())
}

#[inline]
pub(crate) fn adjusted_response_raw(y: f64, xb: f64, tau: f64) -> f64 {
    if y <= xb {
        (y - xb) + tau * xb
    } else {
        tau * xb
    }
}

/// Adjusted responses `Z_i(β)` for every row of `ds`.
pub fn adjusted_responses(ds: &Dataset, beta: &DVector<f64>, tau: QuantileLevel) -> DVector<f64> {
    let xb = ds.fitted(beta);
    DVector::from_iterator(
        ds.n(),
        ds.y()
            .iter()
            .zip(xb.iter())
            .map(|(&y, &f)| adjusted_response(y, f, tau)),
    )
}

/// Per-column centering and scaling applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationInfo {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub applied: bool,
}

impl StandardizationInfo {
    pub fn identity(p: usize) -> Self {
        Self {
            center: vec![0.0; p],
            scale: vec![1.0; p],
            applied: false,
        }
    }
}

/// Centers and scales every non-intercept column to mean 0 and sample sd 1.
///
/// Without an intercept column the covariates are only scaled, since
/// centering would change the fitted values.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, StandardizationInfo)> {
    let (n, p) = (ds.n(), ds.p());
    let mut x = ds.x().clone();
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for j in ds.offset()..p {
        let col = ds.col(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        if !(sd > 0.0) || sd <= 1e-12 * mean.abs() {
            return Err(EsError::DegenerateColumn(ds.column_name(j)));
        }
        let c = if ds.has_intercept() { mean } else { 0.0 };
        for v in x.column_mut(j).iter_mut() {
            *v = (*v - c) / sd;
        }
        center[j] = c;
        scale[j] = sd;
    }
    let mut out = Dataset::new(ds.y().clone(), x, ds.has_intercept())?;
    out.column_names = ds.column_names.clone();
    Ok((
        out,
        StandardizationInfo {
            center,
            scale,
            applied: true,
        },
    ))
}

/// Inverse of [`standardize`] on the design.
pub fn destandardize(ds: &Dataset, info: &StandardizationInfo) -> Result<Dataset> {
    if info.center.len() != ds.p() || info.scale.len() != ds.p() {
        return Err(EsError::DimensionMismatch(format!(
            "standardization info has {} columns, dataset {}",
            info.center.len(),
            ds.p()
        )));
    }
    let mut x = ds.x().clone();
    for j in ds.offset()..ds.p() {
        for v in x.column_mut(j).iter_mut() {
            *v = *v * info.scale[j] + info.center[j];
        }
    }
    let mut out = Dataset::new(ds.y().clone(), x, ds.has_intercept())?;
    out.column_names = ds.column_names.clone();
    Ok(out)
}

/// Maps coefficients fitted on standardized covariates back to the original
/// scale so that fitted values are unchanged.
pub fn destandardize_coefs(coefs: &CoefVector, info: &StandardizationInfo) -> Result<CoefVector> {
    let p = coefs.len();
    if info.center.len() != p || info.scale.len() != p {
        return Err(EsError::DimensionMismatch(format!(
            "{p} coefficients, standardization info for {} columns",
            info.center.len()
        )));
    }
    if !info.applied {
        return Ok(coefs.clone());
    }
    let mut out = coefs.values.clone();
    let mut shift = 0.0;
    for j in 0..p {
        if info.scale[j] != 1.0 || info.center[j] != 0.0 {
            out[j] = coefs.values[j] / info.scale[j];
            shift += out[j] * info.center[j];
        }
    }
    if shift != 0.0 {
        // only reachable with an intercept, since centering requires one
        out[0] -= shift;
    }
    CoefVector::new(out, coefs.role)
}

/// Inverse of [`destandardize_coefs`]: original-scale coefficients mapped to
/// the standardized design.
pub fn restandardize_coefs(coefs: &CoefVector, info: &StandardizationInfo) -> Result<CoefVector> {
    let p = coefs.len();
    if info.center.len() != p || info.scale.len() != p {
        return Err(EsError::DimensionMismatch(format!(
            "{p} coefficients, standardization info for {} columns",
            info.center.len()
        )));
    }
    if !info.applied {
        return Ok(coefs.clone());
    }
    let mut out = coefs.values.clone();
    let mut shift = 0.0;
    for j in 0..p {
        if info.scale[j] != 1.0 || info.center[j] != 0.0 {
            out[j] = coefs.values[j] * info.scale[j];
            shift += coefs.values[j] * info.center[j];
        }
    }
    if shift != 0.0 {
        out[0] += shift;
    }
    CoefVector::new(out, coefs.role)
}
