//! The in-memory trial dataset with observation masks, CSV I/O, centering
//! and standardized-difference diagnostics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value stored at every unobserved position.
pub const MISSING: f64 = f64::NAN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl Covariate {
    pub fn new(name: impl Into<String>, kind: CovariateKind, values: Vec<Option<f64>>) -> Result<Self> {
        let name = name.into();
        let mut stored = Vec::with_capacity(values.len());
        let mut observed = Vec::with_capacity(values.len());
        for (i, v) in values.into_iter().enumerate() {
            match v {
                Some(x) if x.is_finite() => {
                    stored.push(x);
                    observed.push(true);
                }
                Some(_) => {
                    return Err(Error::InvalidInput(format!(
                        "covariate '{name}' unit {i}: non-finite value"
                    )))
                }
                None => {
                    stored.push(MISSING);
                    observed.push(false);
                }
            }
        }
        Ok(Covariate {
            name,
            kind,
            values: stored,
            observed,
        })
    }

    /// Fully observed column from plain values.
    pub fn complete(name: impl Into<String>, kind: CovariateKind, values: Vec<f64>) -> Result<Self> {
        Covariate::new(name, kind, values.into_iter().map(Some).collect())
    }

    /// Raw stored values; NaN at unobserved positions.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn value(&self, i: usize) -> Option<f64> {
        self.observed[i].then_some(self.values[i])
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed.iter().all(|o| *o)
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }

    /// Observation indicator as 0/1 reals.
    pub fn indicator(&self) -> Vec<f64> {
        self.observed.iter().map(|o| if *o { 1.0 } else { 0.0 }).collect()
    }

    fn select(&self, rows: &[usize]) -> Covariate {
        Covariate {
            name: self.name.clone(),
            kind: self.kind,
            values: rows.iter().map(|&i| self.values[i]).collect(),
            observed: rows.iter().map(|&i| self.observed[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenteringRecord {
    pub column: String,
    pub constant: f64,
}

/// Two-arm trial data. Immutable once built; every transformation returns a
/// new dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    treatment_name: String,
    treatment: Vec<u8>,
    outcome_name: String,
    outcome_kind: OutcomeKind,
    outcome: Vec<f64>,
    outcome_observed: Vec<bool>,
    covariates: Vec<Covariate>,
    randomization_probability: f64,
    centering: Vec<CenteringRecord>,
}

impl TrialDataset {
    pub fn new(
        treatment: Vec<u8>,
        outcome_kind: OutcomeKind,
        outcome: Vec<Option<f64>>,
        covariates: Vec<Covariate>,
    ) -> Result<Self> {
        let n = treatment.len();
        if outcome.len() != n {
            return Err(Error::Dimension(format!(
                "{} outcomes for {} units",
                outcome.len(),
                n
            )));
        }
        if let Some(c) = covariates.iter().find(|c| c.values.len() != n) {
            return Err(Error::Dimension(format!(
                "covariate '{}' has {} entries for {} units",
                c.name,
                c.values.len(),
                n
            )));
        }
        if let Some(i) = treatment.iter().position(|z| *z > 1) {
            return Err(Error::InvalidInput(format!("unit {i}: treatment must be 0 or 1")));
        }
        if !treatment.contains(&1) {
            return Err(Error::EmptyArm("treated".into()));
        }
        if !treatment.contains(&0) {
            return Err(Error::EmptyArm("control".into()));
        }
        let mut names: Vec<&str> = covariates.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate covariate names".into()));
        }
        let mut values = Vec::with_capacity(n);
        let mut observed = Vec::with_capacity(n);
        for (i, y) in outcome.into_iter().enumerate() {
            match y {
                Some(v) if v.is_finite() => {
                    if outcome_kind == OutcomeKind::Binary && v != 0.0 && v != 1.0 {
                        return Err(Error::InvalidInput(format!(
                            "unit {i}: binary outcome must be 0 or 1"
                        )));
                    }
                    values.push(v);
                    observed.push(true);
                }
                Some(_) => {
                    return Err(Error::InvalidInput(format!("unit {i}: non-finite outcome")))
                }
                None => {
                    values.push(MISSING);
                    observed.push(false);
                }
            }
        }
        Ok(TrialDataset {
            treatment_name: "z".into(),
            treatment,
            outcome_name: "y".into(),
            outcome_kind,
            outcome: values,
            outcome_observed: observed,
            covariates,
            randomization_probability: 0.5,
            centering: Vec::new(),
        })
    }

    pub fn with_names(mut self, treatment: impl Into<String>, outcome: impl Into<String>) -> Self {
        self.treatment_name = treatment.into();
        self.outcome_name = outcome.into();
        self
    }

    pub fn with_randomization_probability(mut self, r: f64) -> Result<Self> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidInput(format!(
                "randomization probability {r} outside (0,1)"
            )));
        }
        self.randomization_probability = r;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn treatment_f64(&self) -> Vec<f64> {
        self.treatment.iter().map(|&z| z as f64).collect()
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    /// Raw outcome values; NaN where unobserved.
    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn outcome_observed(&self) -> &[bool] {
        &self.outcome_observed
    }

    pub fn outcome_indicator(&self) -> Vec<f64> {
        self.outcome_observed
            .iter()
            .map(|o| if *o { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn has_missing_outcomes(&self) -> bool {
        self.outcome_observed.iter().any(|o| !o)
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name == name)
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    /// Per-column flag marking the fully observed covariate set.
    pub fn fully_observed_flags(&self) -> Vec<bool> {
        self.covariates.iter().map(|c| c.is_fully_observed()).collect()
    }

    /// Per unit: every covariate observed.
    pub fn complete_unit_flags(&self) -> Vec<bool> {
        (0..self.n())
            .map(|i| self.covariates.iter().all(|c| !c.values()[i].is_nan()))
            .collect()
    }

    pub fn randomization_probability(&self) -> f64 {
        self.randomization_probability
    }

    pub fn centering(&self) -> &[CenteringRecord] {
        &self.centering
    }

    pub fn arm_sizes(&self) -> (usize, usize) {
        let n1 = self.treatment.iter().filter(|z| **z == 1).count();
        (n1, self.n() - n1)
    }

    /// Rows in the given order; repeats allowed (used by resampling). The
    /// result must still contain both arms.
    pub fn select_rows(&self, rows: &[usize]) -> Result<TrialDataset> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Dimension(format!("row {bad} out of range")));
        }
        let treatment: Vec<u8> = rows.iter().map(|&i| self.treatment[i]).collect();
        if !treatment.contains(&1) {
            return Err(Error::EmptyArm("treated".into()));
        }
        if !treatment.contains(&0) {
            return Err(Error::EmptyArm("control".into()));
        }
        Ok(TrialDataset {
            treatment_name: self.treatment_name.clone(),
            treatment,
            outcome_name: self.outcome_name.clone(),
            outcome_kind: self.outcome_kind,
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
            outcome_observed: rows.iter().map(|&i| self.outcome_observed[i]).collect(),
            covariates: self.covariates.iter().map(|c| c.select(rows)).collect(),
            randomization_probability: self.randomization_probability,
            centering: self.centering.clone(),
        })
    }

    /// Keeps only the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<TrialDataset> {
        let covariates = names
            .iter()
            .map(|n| {
                self.covariate(n)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("unknown covariate '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrialDataset {
            covariates,
            ..self.clone()
        })
    }

    /// Replaces the outcome observation pattern; values at newly masked
    /// positions become the missing sentinel.
    pub fn mask_outcome(&self, observed: &[bool]) -> Result<TrialDataset> {
        if observed.len() != self.n() {
            return Err(Error::Dimension("outcome mask length".into()));
        }
        let mut out = self.clone();
        for i in 0..self.n() {
            if !observed[i] {
                out.outcome[i] = MISSING;
                out.outcome_observed[i] = false;
            }
        }
        Ok(out)
    }

    /// Masks entries of one covariate; already-missing entries stay missing.
    pub fn mask_covariate(&self, name: &str, observed: &[bool]) -> Result<TrialDataset> {
        if observed.len() != self.n() {
            return Err(Error::Dimension("covariate mask length".into()));
        }
        let mut out = self.clone();
        let col = out
            .covariates
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown covariate '{name}'")))?;
        for i in 0..observed.len() {
            if !observed[i] {
                col.values[i] = MISSING;
                col.observed[i] = false;
            }
        }
        Ok(out)
    }

    /// Flips the arm labels (Z -> 1 - Z).
    pub fn swap_arms(&self) -> TrialDataset {
        let mut out = self.clone();
        for z in &mut out.treatment {
            *z = 1 - *z;
        }
        out.randomization_probability = 1.0 - self.randomization_probability;
        out
    }

    /// Observed outcome means by arm.
    pub fn arm_means(&self) -> Result<(f64, f64)> {
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..self.n() {
            if !self.outcome_observed[i] {
                continue;
            }
            if self.treatment[i] == 1 {
                s1 += self.outcome[i];
                n1 += 1;
            } else {
                s0 += self.outcome[i];
                n0 += 1;
            }
        }
        if n1 == 0 {
            return Err(Error::EmptyArm("treated (observed outcomes)".into()));
        }
        if n0 == 0 {
            return Err(Error::EmptyArm("control (observed outcomes)".into()));
        }
        Ok((s1 / n1 as f64, s0 / n0 as f64))
    }
}

/// Subtracts, from each selected column, the mean of its observed entries.
pub fn center_observed(ds: &TrialDataset, columns: &[String]) -> Result<TrialDataset> {
    let mut out = ds.clone();
    for name in columns {
        let col = out
            .covariates
            .iter_mut()
            .find(|c| &c.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown covariate '{name}'")))?;
        let n_obs = col.n_observed();
        if n_obs == 0 {
            return Err(Error::Data(format!("covariate '{name}' has no observed entries")));
        }
        let mean = col
            .values
            .iter()
            .zip(&col.observed)
            .filter(|(_, o)| **o)
            .map(|(v, _)| *v)
            .sum::<f64>()
            / n_obs as f64;
        for (v, o) in col.values.iter_mut().zip(&col.observed) {
            if *o {
                *v -= mean;
            }
        }
        out.centering.push(CenteringRecord {
            column: name.clone(),
            constant: mean,
        });
    }
    Ok(out)
}

/// Absolute standardized difference of one covariate between arms.
///
/// Units with the covariate unobserved are excluded. With `weights`, group
/// means are weight-normalized; the pooled variance is always unweighted
/// (sample variance for continuous columns, `p(1-p)` on the column's own
/// scale for binary ones).
pub fn asd(ds: &TrialDataset, column: &str, weights: Option<&[f64]>) -> Result<f64> {
    let col = ds
        .covariate(column)
        .ok_or_else(|| Error::InvalidInput(format!("unknown covariate '{column}'")))?;
    if let Some(w) = weights {
        if w.len() != ds.n() {
            return Err(Error::Dimension("weight vector length".into()));
        }
    }
    let mut arms: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for i in 0..ds.n() {
        if let Some(x) = col.value(i) {
            let w = weights.map_or(1.0, |w| w[i]);
            arms[ds.treatment[i] as usize].push((x, w));
        }
    }
    if arms[0].len() < 2 || arms[1].len() < 2 {
        return Err(Error::Data(format!(
            "covariate '{column}' needs two observed units per arm"
        )));
    }
    let variance = |xs: &[(f64, f64)]| -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().map(|(x, _)| x).sum::<f64>() / n;
        let ss = xs.iter().map(|(x, _)| (x - m) * (x - m)).sum::<f64>();
        match col.kind {
            CovariateKind::Continuous => ss / (n - 1.0),
            CovariateKind::Binary => ss / n,
        }
    };
    let wmean = |xs: &[(f64, f64)]| -> Result<f64> {
        let ws: f64 = xs.iter().map(|(_, w)| w).sum();
        if ws <= 0.0 {
            return Err(Error::InvalidInput("zero total weight in an arm".into()));
        }
        Ok(xs.iter().map(|(x, w)| x * w).sum::<f64>() / ws)
    };
    let pooled = (variance(&arms[1]) + variance(&arms[0])) / 2.0;
    if pooled <= 0.0 {
        return Err(Error::Data(format!("covariate '{column}' has zero pooled variance")));
    }
    Ok((wmean(&arms[1])? - wmean(&arms[0])?).abs() / pooled.sqrt())
}

/// Role of a CSV column in the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSpec {
    #[serde(rename = "treatment")]
    Treatment,
    #[serde(rename = "outcome")]
    Outcome,
    #[serde(rename = "outcome:binary")]
    BinaryOutcome,
    #[serde(rename = "covariate:continuous")]
    Continuous,
    #[serde(rename = "covariate:binary")]
    Binary,
    #[serde(rename = "ignore")]
    Ignore,
}

impl std::str::FromStr for ColumnSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown column role '{s}'")))
    }
}

/// Column-name to role mapping for CSV ingestion. Columns not mentioned are
/// ignored.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: BTreeMap<String, ColumnSpec>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub randomization_probability: Option<f64>,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new() -> Self {
        CsvSchema {
            columns: BTreeMap::new(),
            delimiter: ',',
            randomization_probability: None,
        }
    }

    pub fn column(mut self, name: impl Into<String>, spec: ColumnSpec) -> Self {
        self.columns.insert(name.into(), spec);
        self
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: CsvSchema = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(schema)
    }
}

fn is_missing_token(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na")
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if is_missing_token(cell) {
        return Ok(None);
    }
    cell.trim()
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse {
            row,
            column: column.to_string(),
            message: format!("cannot parse '{cell}' as a number"),
        })
}

/// Reads a trial from a headed CSV. Empty cells and `NA` (any case) are
/// missing. Row numbers in errors count the header as row 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TrialDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<TrialDataset> {
    let delim = u8::try_from(schema.delimiter as u32)
        .map_err(|_| Error::Config("delimiter must be a single-byte character".into()))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found in header")))
    };
    let mut treatment_col = None;
    let mut outcome_col = None;
    let mut covariate_cols = Vec::new();
    for (name, spec) in &schema.columns {
        match spec {
            ColumnSpec::Treatment => {
                if treatment_col.replace((name.clone(), find(name)?)).is_some() {
                    return Err(Error::Config("more than one treatment column".into()));
                }
            }
            ColumnSpec::Outcome | ColumnSpec::BinaryOutcome => {
                let kind = if *spec == ColumnSpec::Outcome {
                    OutcomeKind::Continuous
                } else {
                    OutcomeKind::Binary
                };
                if outcome_col.replace((name.clone(), find(name)?, kind)).is_some() {
                    return Err(Error::Config("more than one outcome column".into()));
                }
            }
            ColumnSpec::Continuous => {
                covariate_cols.push((name.clone(), find(name)?, CovariateKind::Continuous))
            }
            ColumnSpec::Binary => {
                covariate_cols.push((name.clone(), find(name)?, CovariateKind::Binary))
            }
            ColumnSpec::Ignore => {}
        }
    }
    let (tname, tidx) =
        treatment_col.ok_or_else(|| Error::Config("schema names no treatment column".into()))?;
    let (yname, yidx, ykind) =
        outcome_col.ok_or_else(|| Error::Config("schema names no outcome column".into()))?;
    // keep header order for covariates
    covariate_cols.sort_by_key(|(_, idx, _)| *idx);

    let mut z = Vec::new();
    let mut y = Vec::new();
    let mut xs: Vec<Vec<Option<f64>>> = vec![Vec::new(); covariate_cols.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 2;
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        let zv = parse_cell(cell(tidx), row, &tname)?.ok_or_else(|| Error::Parse {
            row,
            column: tname.clone(),
            message: "treatment must be observed".into(),
        })?;
        if zv != 0.0 && zv != 1.0 {
            return Err(Error::Parse {
                row,
                column: tname.clone(),
                message: format!("treatment value {} is not 0 or 1", cell(tidx).trim()),
            });
        }
        z.push(zv as u8);
        let yv = parse_cell(cell(yidx), row, &yname)?;
        if ykind == OutcomeKind::Binary {
            if let Some(v) = yv {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Parse {
                        row,
                        column: yname.clone(),
                        message: "binary outcome must be 0 or 1".into(),
                    });
                }
            }
        }
        y.push(yv);
        for (k, (name, idx, _)) in covariate_cols.iter().enumerate() {
            xs[k].push(parse_cell(cell(*idx), row, name)?);
        }
    }
    let covariates = covariate_cols
        .into_iter()
        .zip(xs)
        .map(|((name, _, kind), vals)| Covariate::new(name, kind, vals))
        .collect::<Result<Vec<_>>>()?;
    let ds = TrialDataset::new(z, ykind, y, covariates)?.with_names(tname, yname);
    match schema.randomization_probability {
        Some(r) => ds.with_randomization_probability(r),
        None => Ok(ds),
    }
}

fn format_value(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}

/// Writes treatment, outcome and covariates; missing cells are left empty.
pub fn write_csv(ds: &TrialDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(ds, file, ',')
}

pub fn write_csv_to<W: std::io::Write>(ds: &TrialDataset, writer: W, delimiter: char) -> Result<()> {
    let delim = u8::try_from(delimiter as u32)
        .map_err(|_| Error::Config("delimiter must be a single-byte character".into()))?;
    let mut w = csv::WriterBuilder::new().delimiter(delim).from_writer(writer);
    let mut header = vec![ds.treatment_name.clone(), ds.outcome_name.clone()];
    header.extend(ds.covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![ds.treatment[i].to_string()];
        rec.push(if ds.outcome_observed[i] {
            format_value(ds.outcome[i])
        } else {
            String::new()
        });
        for c in &ds.covariates {
            rec.push(c.value(i).map(format_value).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema matching the layout produced by [`write_csv`].
pub fn schema_for(ds: &TrialDataset) -> CsvSchema {
    let mut s = CsvSchema::new().column(ds.treatment_name.clone(), ColumnSpec::Treatment).column(
        ds.outcome_name.clone(),
        match ds.outcome_kind {
            OutcomeKind::Continuous => ColumnSpec::Outcome,
            OutcomeKind::Binary => ColumnSpec::BinaryOutcome,
        },
    );
    for c in &ds.covariates {
        s = s.column(
            c.name.clone(),
            match c.kind {
                CovariateKind::Continuous => ColumnSpec::Continuous,
                CovariateKind::Binary => ColumnSpec::Binary,
            },
        );
    }
    s
}
