//! Covariate imputation and the missing-indicator adjustment columns.
//!
//! Whatever fill value is used, a design that also carries the observation
//! indicator spans the same space as one built from the zero-filled product
//! `X * R`, so downstream fits do not depend on the fill constant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{CovariateKind, TrialDataset};
use crate::error::{Error, Result};
use crate::numerics::{solve_least_squares, ColumnRole, DesignMatrix};

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Linear(String),
    /// Square of the mean-centered predictor.
    Square(String),
}

impl Term {
    pub fn predictor(&self) -> &str {
        match self {
            Term::Linear(p) | Term::Square(p) => p,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Linear(p) => write!(f, "{p}"),
            Term::Square(p) => write!(f, "sq({p})"),
        }
    }
}

/// Linear imputation model `response ~ term + term + ...` with intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFormula {
    pub response: String,
    pub terms: Vec<Term>,
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        write!(f, "{}~{}", self.response, terms.join("+"))
    }
}

impl FromStr for ModelFormula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (lhs, rhs) = s
            .split_once('~')
            .ok_or_else(|| Error::Config(format!("model formula '{s}' lacks '~'")))?;
        let response = lhs.trim().to_string();
        if response.is_empty() {
            return Err(Error::Config(format!("model formula '{s}' has no response")));
        }
        let mut terms = Vec::new();
        for raw in rhs.split('+') {
            let t = raw.trim();
            if t.is_empty() {
                return Err(Error::Config(format!("empty term in model formula '{s}'")));
            }
            if let Some(inner) = t.strip_prefix("sq(").and_then(|r| r.strip_suffix(')')) {
                terms.push(Term::Square(inner.trim().to_string()));
            } else {
                terms.push(Term::Linear(t.to_string()));
            }
        }
        Ok(ModelFormula { response, terms })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImputationStrategy {
    Constant(f64),
    Mean,
    Median,
    Model(ModelFormula),
}

impl fmt::Display for ImputationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImputationStrategy::Constant(c) if *c == 0.0 => write!(f, "zero"),
            ImputationStrategy::Constant(c) => write!(f, "constant:{c}"),
            ImputationStrategy::Mean => write!(f, "mean"),
            ImputationStrategy::Median => write!(f, "median"),
            ImputationStrategy::Model(m) => write!(f, "model:{m}"),
        }
    }
}

impl FromStr for ImputationStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "zero" => return Ok(ImputationStrategy::Constant(0.0)),
            "mean" => return Ok(ImputationStrategy::Mean),
            "median" => return Ok(ImputationStrategy::Median),
            _ => {}
        }
        if let Some(v) = s.strip_prefix("constant:") {
            let c: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad imputation constant '{v}'")))?;
            return Ok(ImputationStrategy::Constant(c));
        }
        if let Some(m) = s.strip_prefix("model:") {
            return Ok(ImputationStrategy::Model(m.parse()?));
        }
        Err(Error::Config(format!(
            "unknown imputation strategy '{s}' (expected zero, mean, median, constant:<v>, model:<y>~<x>+...)"
        )))
    }
}

/// Default strategy plus per-column overrides.
///
/// Text form: `;`-separated items. A bare strategy sets the default, a
/// `model:` item overrides its response column, and `col=strategy`
/// overrides one column, e.g. `median;model:x1~x2;x4=zero`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSpec {
    pub default: ImputationStrategy,
    pub overrides: BTreeMap<String, ImputationStrategy>,
}

impl Default for ImputationSpec {
    fn default() -> Self {
        ImputationSpec::uniform(ImputationStrategy::Median)
    }
}

impl ImputationSpec {
    pub fn uniform(strategy: ImputationStrategy) -> Self {
        ImputationSpec {
            default: strategy,
            overrides: BTreeMap::new(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::uniform(ImputationStrategy::Constant(c))
    }

    pub fn mean() -> Self {
        Self::uniform(ImputationStrategy::Mean)
    }

    pub fn median() -> Self {
        Self::uniform(ImputationStrategy::Median)
    }

    pub fn with_override(mut self, column: impl Into<String>, strategy: ImputationStrategy) -> Self {
        self.overrides.insert(column.into(), strategy);
        self
    }

    /// Model imputation for its response column, median elsewhere.
    pub fn model(formula: &str) -> Result<Self> {
        let f: ModelFormula = formula.parse()?;
        Ok(Self::median().with_override(f.response.clone(), ImputationStrategy::Model(f)))
    }

    pub fn strategy_for(&self, column: &str) -> &ImputationStrategy {
        self.overrides.get(column).unwrap_or(&self.default)
    }
}

impl fmt::Display for ImputationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.default)?;
        for (col, s) in &self.overrides {
            match s {
                ImputationStrategy::Model(m) if &m.response == col => write!(f, ";{s}")?,
                _ => write!(f, ";{col}={s}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for ImputationSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = ImputationSpec::default();
        let mut default_set = false;
        for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
            if let Some(m) = item.strip_prefix("model:") {
                let f: ModelFormula = m.parse()?;
                spec.overrides
                    .insert(f.response.clone(), ImputationStrategy::Model(f));
            } else if let Some((col, strat)) = item.split_once('=') {
                spec.overrides.insert(col.trim().to_string(), strat.parse()?);
            } else {
                if default_set {
                    return Err(Error::Config(format!("two default strategies in '{s}'")));
                }
                spec.default = item.parse()?;
                default_set = true;
            }
        }
        Ok(spec)
    }
}

impl Serialize for ImputationSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ImputationSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What was done to one column during imputation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImputationRecord {
    pub column: String,
    pub strategy: String,
    pub n_imputed: usize,
    /// Single fill value, for constant/mean/median strategies.
    pub fill_value: Option<f64>,
    /// Intercept and term coefficients of a fitted imputation model.
    pub model_coefficients: Vec<(String, f64)>,
    pub note: Option<String>,
}

/// A trial dataset whose covariates have all been filled.
#[derive(Debug, Clone)]
pub struct CompletedDataset {
    base: TrialDataset,
    imputed: Vec<Vec<f64>>,
    records: Vec<ImputationRecord>,
    spec: ImputationSpec,
}

impl CompletedDataset {
    pub fn base(&self) -> &TrialDataset {
        &self.base
    }

    /// Filled column `j`, in covariate order of the base dataset.
    pub fn imputed(&self, j: usize) -> &[f64] {
        &self.imputed[j]
    }

    pub fn imputed_by_name(&self, name: &str) -> Option<&[f64]> {
        self.base
            .covariates()
            .iter()
            .position(|c| c.name == name)
            .map(|j| self.imputed[j].as_slice())
    }

    pub fn records(&self) -> &[ImputationRecord] {
        &self.records
    }

    pub fn spec(&self) -> &ImputationSpec {
        &self.spec
    }

    /// Keeps only the named covariates (with their filled values).
    pub fn restrict_covariates(&self, names: &[String]) -> Result<CompletedDataset> {
        let base = self.base.select_covariates(names)?;
        let imputed = names
            .iter()
            .map(|n| self.imputed_by_name(n).unwrap().to_vec())
            .collect();
        let records = self
            .records
            .iter()
            .filter(|r| names.contains(&r.column))
            .cloned()
            .collect();
        Ok(CompletedDataset {
            base,
            imputed,
            records,
            spec: self.spec.clone(),
        })
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fills every missing covariate entry. Observed entries are copied
/// unchanged.
pub fn impute(ds: &TrialDataset, spec: &ImputationSpec) -> Result<CompletedDataset> {
    for col in spec.overrides.keys() {
        if ds.covariate(col).is_none() {
            return Err(Error::Config(format!("imputation override for unknown covariate '{col}'")));
        }
    }
    let n = ds.n();
    let mut imputed = Vec::with_capacity(ds.covariates().len());
    let mut records = Vec::new();
    for cov in ds.covariates() {
        let mut filled = cov.values().to_vec();
        let missing: Vec<usize> = (0..n).filter(|&i| !cov.observed()[i]).collect();
        if missing.is_empty() {
            imputed.push(filled);
            continue;
        }
        let observed: Vec<f64> = (0..n).filter_map(|i| cov.value(i)).collect();
        if observed.is_empty() {
            return Err(Error::Data(format!("covariate '{}' has no observed entries", cov.name)));
        }
        let mut strategy = spec.strategy_for(&cov.name).clone();
        let mut note = None;
        if cov.kind == CovariateKind::Binary && strategy == ImputationStrategy::Mean {
            strategy = ImputationStrategy::Median;
            note = Some("binary covariate: mean replaced by median of the coding".to_string());
        }
        let mut record = ImputationRecord {
            column: cov.name.clone(),
            strategy: strategy.to_string(),
            n_imputed: missing.len(),
            fill_value: None,
            model_coefficients: Vec::new(),
            note,
        };
        match &strategy {
            ImputationStrategy::Constant(c) => record.fill_value = Some(*c),
            ImputationStrategy::Mean => {
                record.fill_value = Some(observed.iter().sum::<f64>() / observed.len() as f64)
            }
            ImputationStrategy::Median => {
                let mut s = observed.clone();
                s.sort_by(|a, b| a.total_cmp(b));
                record.fill_value = Some(median(&s));
            }
            ImputationStrategy::Model(formula) => {
                if formula.response != cov.name {
                    return Err(Error::Config(format!(
                        "model formula for '{}' is applied to column '{}'",
                        formula.response, cov.name
                    )));
                }
                let predictions = model_predictions(ds, formula, &missing)?;
                for (&i, (p, _)) in missing.iter().zip(&predictions.0) {
                    filled[i] = *p;
                    let _ = i;
                }
                record.model_coefficients = predictions.1;
                if formula.terms.iter().any(|t| matches!(t, Term::Square(_))) {
                    record.note = Some("squared terms use the mean-centered predictor".into());
                }
            }
        }
        if let Some(v) = record.fill_value {
            for &i in &missing {
                filled[i] = v;
            }
        }
        imputed.push(filled);
        records.push(record);
    }
    Ok(CompletedDataset {
        base: ds.clone(),
        imputed,
        records,
        spec: spec.clone(),
    })
}

type Predictions = (Vec<(f64, usize)>, Vec<(String, f64)>);

fn model_predictions(ds: &TrialDataset, formula: &ModelFormula, missing: &[usize]) -> Result<Predictions> {
    let response = ds.covariate(&formula.response).unwrap();
    let n = ds.n();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for term in &formula.terms {
        let pred = ds.covariate(term.predictor()).ok_or_else(|| {
            Error::Config(format!("imputation model uses unknown covariate '{}'", term.predictor()))
        })?;
        if !pred.is_fully_observed() {
            return Err(Error::Config(format!(
                "imputation model predictor '{}' is not fully observed",
                pred.name
            )));
        }
        let vals = pred.values();
        let col = match term {
            Term::Linear(_) => vals.to_vec(),
            Term::Square(_) => {
                let m = vals.iter().sum::<f64>() / n as f64;
                vals.iter().map(|v| (v - m) * (v - m)).collect()
            }
        };
        columns.push((term.to_string(), col));
    }
    let obs_rows: Vec<usize> = (0..n).filter(|&i| response.observed()[i]).collect();
    let mut design = DesignMatrix::intercept_only(n);
    for (label, col) in &columns {
        design.push(label.clone(), ColumnRole::Covariate, col)?;
    }
    let fit_design = design.select_rows(&obs_rows);
    let y: Vec<f64> = obs_rows.iter().map(|&i| response.values()[i]).collect();
    let fit = solve_least_squares(&fit_design, &y, None)?;
    let beta: Vec<f64> = fit.coefficients.iter().map(|c| c.unwrap_or(0.0)).collect();
    let preds = missing
        .iter()
        .map(|&i| {
            let v: f64 = (0..design.ncols()).map(|j| design.values()[(i, j)] * beta[j]).sum();
            (v, i)
        })
        .collect();
    let coefs = fit
        .labels
        .iter()
        .zip(&fit.coefficients)
        .filter_map(|(l, c)| c.map(|c| (l.clone(), c)))
        .collect();
    Ok((preds, coefs))
}

/// One regressor handed to the estimators, before centering.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentColumn {
    pub label: String,
    pub role: ColumnRole,
    pub values: Vec<f64>,
}

pub fn indicator_label(covariate: &str) -> String {
    format!("R[{covariate}]")
}

/// Filled covariate columns, plus (with `include_msi`) the observation
/// indicator of every partially observed covariate. Fully observed
/// covariates never get an indicator, since it would be constant.
pub fn build_adjustment_columns(
    cd: &CompletedDataset,
    include_msi: bool,
    center_indicators: bool,
) -> Vec<AdjustmentColumn> {
    let mut out = Vec::new();
    for (j, cov) in cd.base.covariates().iter().enumerate() {
        out.push(AdjustmentColumn {
            label: cov.name.clone(),
            role: ColumnRole::Covariate,
            values: cd.imputed[j].clone(),
        });
        if include_msi && !cov.is_fully_observed() {
            let mut r = cov.indicator();
            if center_indicators {
                let m = r.iter().sum::<f64>() / r.len() as f64;
                r.iter_mut().for_each(|v| *v -= m);
            }
            out.push(AdjustmentColumn {
                label: indicator_label(&cov.name),
                role: ColumnRole::Indicator,
                values: r,
            });
        }
    }
    out
}
