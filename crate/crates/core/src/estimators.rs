//! Treatment-effect estimators: difference in means, interacted ANCOVA,
//! balancing weights with a working propensity score, outcome-missingness
//! models and the combined overlap/inverse-probability weighting pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CenteringRecord, OutcomeKind, TrialDataset};
use crate::error::{Error, Result};
use crate::inference::{sandwich_variance, PropensityTreatment};
use crate::missing::{
    build_adjustment_columns, impute, indicator_label, CompletedDataset, ImputationRecord, ImputationSpec,
};
use crate::numerics::{
    fit_logistic_irls, hc_robust_covariance, solve_least_squares, ColumnRole, DesignMatrix, LinearFit,
    LogisticFit,
};

/// Lower bound applied to fitted outcome-observation probabilities.
pub const P_HAT_FLOOR: f64 = 0.01;

/// Tolerance used to flag a failure of exact balance.
pub const BALANCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Ipw,
    Ow,
}

impl WeightScheme {
    /// Tilting function `h(e)`.
    pub fn tilt(self, e: f64) -> f64 {
        match self {
            WeightScheme::Ipw => 1.0,
            WeightScheme::Ow => e * (1.0 - e),
        }
    }

    /// `h(e) / e`
    pub fn treated_weight(self, e: f64) -> f64 {
        match self {
            WeightScheme::Ipw => 1.0 / e,
            WeightScheme::Ow => 1.0 - e,
        }
    }

    /// `h(e) / (1 - e)`
    pub fn control_weight(self, e: f64) -> f64 {
        match self {
            WeightScheme::Ipw => 1.0 / (1.0 - e),
            WeightScheme::Ow => e,
        }
    }

    pub(crate) fn treated_weight_derivative(self, e: f64) -> f64 {
        match self {
            WeightScheme::Ipw => -1.0 / (e * e),
            WeightScheme::Ow => -1.0,
        }
    }

    pub(crate) fn control_weight_derivative(self, e: f64) -> f64 {
        match self {
            WeightScheme::Ipw => 1.0 / ((1.0 - e) * (1.0 - e)),
            WeightScheme::Ow => 1.0,
        }
    }
}

/// Which predictors may drive outcome missingness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Assumption {
    /// Observation indicators, fully observed covariates and treatment only.
    #[default]
    A1,
    /// Additionally the zero-filled partially observed covariates.
    A2,
}

/// Layout of the outcome-missingness model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeRoster {
    /// Intercept, indicators, fully observed covariates and treatment.
    #[default]
    MainEffects,
    /// Intercept, treatment, and treatment times each of the above.
    TreatmentInteracted,
}

/// How `wls` turns fitted observation probabilities into regression weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WlsWeighting {
    /// Weight each observed unit by `p_hat`.
    Probability,
    /// Weight each observed unit by `1 / p_hat`.
    #[default]
    InverseProbability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Unadjusted,
    Ancova,
    Ow,
    Ipw,
    OwIpw,
    Wls,
    CompleteUnit,
    CompleteCovariate,
    CompleteOutcome,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 9] = [
        EstimatorKind::Unadjusted,
        EstimatorKind::Ancova,
        EstimatorKind::Ow,
        EstimatorKind::Ipw,
        EstimatorKind::OwIpw,
        EstimatorKind::Wls,
        EstimatorKind::CompleteUnit,
        EstimatorKind::CompleteCovariate,
        EstimatorKind::CompleteOutcome,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Unadjusted => "unadjusted",
            EstimatorKind::Ancova => "ancova",
            EstimatorKind::Ow => "ow",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::OwIpw => "ow_ipw",
            EstimatorKind::Wls => "wls",
            EstimatorKind::CompleteUnit => "complete_unit",
            EstimatorKind::CompleteCovariate => "complete_covariate",
            EstimatorKind::CompleteOutcome => "complete_outcome",
        }
    }

    fn is_basic(self) -> bool {
        matches!(
            self,
            EstimatorKind::Unadjusted | EstimatorKind::Ancova | EstimatorKind::Ow | EstimatorKind::Ipw
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown estimator '{s}'; valid: {}", valid.join(", ")))
            })
    }
}

fn default_true() -> bool {
    true
}

/// Full description of one analysis method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub imputation: ImputationSpec,
    #[serde(default = "default_true")]
    pub include_msi: bool,
    #[serde(default)]
    pub assumption: Assumption,
    #[serde(default)]
    pub roster: OutcomeRoster,
    /// Estimator run on the subset chosen by a complete-case mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjustment: Option<EstimatorKind>,
    /// Covariates used for adjustment; all when absent. The outcome
    /// missingness model always sees every covariate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(default)]
    pub wls_weights: WlsWeighting,
}

impl MethodSpec {
    pub fn new(estimator: EstimatorKind) -> Self {
        MethodSpec {
            estimator,
            imputation: ImputationSpec::default(),
            include_msi: true,
            assumption: Assumption::A1,
            roster: OutcomeRoster::MainEffects,
            adjustment: None,
            covariates: None,
            wls_weights: WlsWeighting::default(),
        }
    }

    pub fn imputation(mut self, spec: ImputationSpec) -> Self {
        self.imputation = spec;
        self
    }

    pub fn msi(mut self, include: bool) -> Self {
        self.include_msi = include;
        self
    }

    pub fn assumption(mut self, a: Assumption) -> Self {
        self.assumption = a;
        self
    }

    pub fn roster(mut self, r: OutcomeRoster) -> Self {
        self.roster = r;
        self
    }

    pub fn adjustment(mut self, k: EstimatorKind) -> Self {
        self.adjustment = Some(k);
        self
    }

    pub fn covariates<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.covariates = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn wls_weights(mut self, w: WlsWeighting) -> Self {
        self.wls_weights = w;
        self
    }

    fn resolved_adjustment(&self) -> EstimatorKind {
        self.adjustment.unwrap_or(match self.estimator {
            EstimatorKind::CompleteOutcome => EstimatorKind::Unadjusted,
            _ => EstimatorKind::Ancova,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(adj) = self.adjustment {
            if !adj.is_basic() {
                return Err(Error::Config(format!(
                    "adjustment must be unadjusted, ancova, ow or ipw (got {adj})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    Bootstrap,
    HcRobust,
    Sandwich,
}

/// Fitted logistic model, summarized for reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub roster: Vec<String>,
    pub coefficients: Vec<(String, Option<f64>)>,
    pub dropped_columns: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
}

impl ModelSummary {
    fn from_fit(fit: &LogisticFit) -> Self {
        ModelSummary {
            roster: fit.labels.clone(),
            coefficients: fit.labels.iter().cloned().zip(fit.coefficients.iter().copied()).collect(),
            dropped_columns: fit.dropped_columns.clone(),
            converged: fit.converged,
            iterations: fit.iterations,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub imputation: Vec<ImputationRecord>,
    pub centering: Vec<CenteringRecord>,
    pub adjustment_columns: Vec<String>,
    pub dropped_columns: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment_model: Option<ModelSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_missingness_model: Option<ModelSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub tau_hat: f64,
    pub method: MethodSpec,
    pub variance: BTreeMap<VarianceKind, f64>,
    /// Confidence intervals keyed by construction ("percentile", "normal").
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub intervals: BTreeMap<String, (f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_failures: Option<usize>,
    pub n_used: usize,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl EstimateResult {
    fn new(tau_hat: f64, method: MethodSpec, n_used: usize) -> Self {
        EstimateResult {
            tau_hat,
            method,
            variance: BTreeMap::new(),
            intervals: BTreeMap::new(),
            bootstrap_failures: None,
            n_used,
            warnings: Vec::new(),
            provenance: Provenance::default(),
        }
    }
}

/// Working treatment propensity model.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub fit: LogisticFit,
    design: DesignMatrix,
    pub include_msi: bool,
    pub warnings: Vec<String>,
}

impl PropensityFit {
    pub fn scores(&self) -> &[f64] {
        &self.fit.fitted_probabilities
    }

    pub fn roster(&self) -> &[String] {
        self.design.labels()
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub(crate) fn retained_design(&self) -> DMatrix<f64> {
        self.design.values().select_columns(&self.fit.retained)
    }
}

/// Model for the probability that a unit's outcome is observed.
#[derive(Debug, Clone)]
pub struct OutcomeMissingnessFit {
    pub assumption: Assumption,
    pub roster_kind: OutcomeRoster,
    pub fit: LogisticFit,
    design: DesignMatrix,
    /// Fitted probabilities after the floor.
    pub p_hat: Vec<f64>,
    pub n_floored: usize,
    pub warnings: Vec<String>,
}

impl OutcomeMissingnessFit {
    pub fn roster(&self) -> &[String] {
        self.design.labels()
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub(crate) fn retained_design(&self) -> DMatrix<f64> {
        self.design.values().select_columns(&self.fit.retained)
    }
}

fn observed_rows(ds: &TrialDataset) -> Vec<usize> {
    (0..ds.n()).filter(|&i| ds.outcome_observed()[i]).collect()
}

fn clamp_binary(ds: &TrialDataset, tau: f64, warnings: &mut Vec<String>) -> f64 {
    if ds.outcome_kind() == OutcomeKind::Binary && tau.abs() > 1.0 {
        warnings.push(format!("risk difference {tau} clamped to [-1, 1]"));
        tau.clamp(-1.0, 1.0)
    } else {
        tau
    }
}

/// Difference in observed-outcome means.
pub fn unadjusted(ds: &TrialDataset) -> Result<EstimateResult> {
    let (tau, var) = unadjusted_parts(ds)?;
    let mut res = EstimateResult::new(tau, MethodSpec::new(EstimatorKind::Unadjusted), observed_rows(ds).len());
    res.variance.insert(VarianceKind::HcRobust, var);
    if ds.has_missing_outcomes() {
        res.warnings
            .push("restricted to units with observed outcomes".to_string());
    }
    Ok(res)
}

fn unadjusted_parts(ds: &TrialDataset) -> Result<(f64, f64)> {
    let (m1, m0) = ds.arm_means()?;
    let mut ss = [0.0; 2];
    let mut counts = [0usize; 2];
    for i in observed_rows(ds) {
        let z = ds.treatment()[i] as usize;
        let d = ds.outcome()[i] - if z == 1 { m1 } else { m0 };
        ss[z] += d * d;
        counts[z] += 1;
    }
    let var = ss[1] / (counts[1] * counts[1]) as f64 + ss[0] / (counts[0] * counts[0]) as f64;
    Ok((m1 - m0, var))
}

struct AncovaParts {
    tau: f64,
    fit: LinearFit,
    design: DesignMatrix,
    treatment_label: String,
    centering: Vec<CenteringRecord>,
    columns: Vec<String>,
    uninteracted: Vec<String>,
}

fn interaction_label(z: &str, col: &str) -> String {
    format!("{z}:{col}")
}

/// Interacted regression over `rows`, with adjustment columns centered at
/// their (regression-weighted) mean over the same rows.
fn ancova_core(
    cd: &CompletedDataset,
    include_msi: bool,
    rows: &[usize],
    weights: Option<&[f64]>,
) -> Result<AncovaParts> {
    let ds = cd.base();
    let zname = ds.treatment_name().to_string();
    let cols = build_adjustment_columns(cd, include_msi, false);
    let z: Vec<f64> = rows.iter().map(|&i| ds.treatment()[i] as f64).collect();
    let mut design = DesignMatrix::intercept_only(rows.len()).with(&zname, ColumnRole::Treatment, &z)?;
    let mut centering = Vec::new();
    let mut centered_cols = Vec::new();
    for col in &cols {
        let m = match weights {
            Some(w) => {
                rows.iter().zip(w).map(|(&i, wi)| wi * col.values[i]).sum::<f64>() / w.iter().sum::<f64>()
            }
            None => rows.iter().map(|&i| col.values[i]).sum::<f64>() / rows.len() as f64,
        };
        centering.push(CenteringRecord {
            column: col.label.clone(),
            constant: m,
        });
        let v: Vec<f64> = rows.iter().map(|&i| col.values[i] - m).collect();
        design.push(&col.label, col.role, &v)?;
        centered_cols.push((col.label.clone(), v));
    }
    let main = design;
    let y: Vec<f64> = rows.iter().map(|&i| ds.outcome()[i]).collect();
    // A covariate keeps its treatment interaction only while the shift that
    // a change of fill value induces (through its indicator) stays
    // expressible without the treatment column. Otherwise the fill value
    // would leak into the estimate.
    let mut uninteracted: Vec<String> = Vec::new();
    let (design, fit) = loop {
        let mut design = main.clone();
        for (label, v) in &centered_cols {
            if uninteracted.contains(label) {
                continue;
            }
            let zv: Vec<f64> = v.iter().zip(&z).map(|(a, b)| a * b).collect();
            design.push(interaction_label(&zname, label), ColumnRole::Interaction, &zv)?;
        }
        let fit = solve_least_squares(&design, &y, weights)?;
        let mut changed = false;
        for cov in cd.base().covariates() {
            let ind = indicator_label(&cov.name);
            let inter = interaction_label(&zname, &ind);
            let Some(j) = design.column_index(&inter) else { continue };
            if fit.coefficients[j].is_none() && !spanned_without_treatment(&design, &fit, design.column(j))? {
                uninteracted.push(cov.name.clone());
                uninteracted.push(ind);
                changed = true;
            }
        }
        if !changed {
            break (design, fit);
        }
    };
    let tau = fit
        .coefficient(&zname)
        .ok_or_else(|| Error::Singular("treatment column is collinear with the adjustment columns".into()))?;
    Ok(AncovaParts {
        tau,
        fit,
        design,
        treatment_label: zname,
        centering,
        columns: cols.into_iter().map(|c| c.label).collect(),
        uninteracted,
    })
}

/// Whether `v` lies in the span of the retained columns of `fit` other than
/// the treatment column.
fn spanned_without_treatment(design: &DesignMatrix, fit: &LinearFit, v: &[f64]) -> Result<bool> {
    let mut basis = DesignMatrix::intercept_only(design.nrows());
    for &j in &fit.retained {
        let role = design.roles()[j];
        if role != ColumnRole::Intercept && role != ColumnRole::Treatment {
            basis.push(&design.labels()[j], role, design.column(j))?;
        }
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(true);
    }
    let resid = solve_least_squares(&basis, v, None)?.residuals;
    Ok(resid.iter().map(|a| a * a).sum::<f64>().sqrt() <= 1e-8 * norm)
}

fn ancova_result(
    cd: &CompletedDataset,
    parts: AncovaParts,
    method: MethodSpec,
    n_used: usize,
    with_variance: bool,
) -> Result<EstimateResult> {
    let mut warnings = Vec::new();
    let tau = clamp_binary(cd.base(), parts.tau, &mut warnings);
    let mut res = EstimateResult::new(tau, method, n_used);
    if with_variance {
        let cov = hc_robust_covariance(&parts.fit, &parts.design)?;
        if let Some(v) = cov.variance_of(&parts.treatment_label) {
            res.variance.insert(VarianceKind::HcRobust, v.max(0.0));
        }
    }
    for d in &parts.fit.dropped_columns {
        warnings.push(format!("column '{d}' dropped (rank deficient)"));
    }
    for c in &parts.uninteracted {
        warnings.push(format!("column '{c}' not interacted with treatment (missingness pattern absent in one arm)"));
    }
    res.warnings = warnings;
    res.provenance = Provenance {
        imputation: cd.records().to_vec(),
        centering: parts.centering,
        adjustment_columns: parts.columns,
        dropped_columns: parts.fit.dropped_columns.clone(),
        ..Provenance::default()
    };
    Ok(res)
}

/// Regression of the outcome on treatment, centered adjustment columns and
/// their treatment interactions, over units with observed outcomes. The
/// estimate is the treatment coefficient.
pub fn ancova_lin(cd: &CompletedDataset, include_msi: bool) -> Result<EstimateResult> {
    let method = MethodSpec::new(EstimatorKind::Ancova)
        .imputation(cd.spec().clone())
        .msi(include_msi);
    ancova_with(cd, method, true)
}

fn ancova_with(cd: &CompletedDataset, method: MethodSpec, with_variance: bool) -> Result<EstimateResult> {
    let rows = observed_rows(cd.base());
    let parts = ancova_core(cd, method.include_msi, &rows, None)?;
    let mut res = ancova_result(cd, parts, method, rows.len(), with_variance)?;
    if cd.base().has_missing_outcomes() {
        res.warnings
            .push("restricted to units with observed outcomes".to_string());
    }
    Ok(res)
}

/// ANCOVA on observed outcomes weighted by a function of the fitted
/// observation probabilities. Adjustment columns are centered at their
/// weighted mean, so constant weights reproduce [`ancova_lin`].
pub fn wls_ancova(cd: &CompletedDataset, p_hat: &[f64], weighting: WlsWeighting) -> Result<EstimateResult> {
    let method = MethodSpec::new(EstimatorKind::Wls)
        .imputation(cd.spec().clone())
        .wls_weights(weighting);
    wls_with(cd, p_hat, method, true)
}

fn wls_with(cd: &CompletedDataset, p_hat: &[f64], method: MethodSpec, with_variance: bool) -> Result<EstimateResult> {
    let ds = cd.base();
    if p_hat.len() != ds.n() {
        return Err(Error::Dimension("p_hat length".into()));
    }
    let rows = observed_rows(ds);
    if rows.iter().any(|&i| !(p_hat[i] > 0.0 && p_hat[i] <= 1.0)) {
        return Err(Error::InvalidInput("p_hat must lie in (0, 1]".into()));
    }
    let w: Vec<f64> = rows
        .iter()
        .map(|&i| match method.wls_weights {
            WlsWeighting::Probability => p_hat[i],
            WlsWeighting::InverseProbability => 1.0 / p_hat[i],
        })
        .collect();
    let parts = ancova_core(cd, method.include_msi, &rows, Some(&w))?;
    ancova_result(cd, parts, method, rows.len(), with_variance)
}

/// Logistic regression of treatment on the filled covariates, plus the raw
/// observation indicators when `include_msi`. Fitted on all units.
pub fn fit_treatment_ps(cd: &CompletedDataset, include_msi: bool) -> Result<PropensityFit> {
    let ds = cd.base();
    let mut design = DesignMatrix::intercept_only(ds.n());
    for col in build_adjustment_columns(cd, include_msi, false) {
        design.push(col.label, col.role, &col.values)?;
    }
    let fit = fit_logistic_irls(&design, &ds.treatment_f64(), None)?;
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push(format!(
            "treatment propensity model did not converge (max score {:.3e})",
            fit.max_abs_score
        ));
    }
    for d in &fit.dropped_columns {
        warnings.push(format!("propensity column '{d}' dropped (rank deficient)"));
    }
    Ok(PropensityFit {
        fit,
        design,
        include_msi,
        warnings,
    })
}

/// Hajek-form weighted difference over units with observed outcomes.
/// With `p_hat`, each unit's weight is divided by its (floored) observation
/// probability.
pub fn weighting_estimate(
    ds: &TrialDataset,
    propensity: &[f64],
    scheme: WeightScheme,
    p_hat: Option<&[f64]>,
) -> Result<EstimateResult> {
    let (tau, n_used, mut warnings) = hajek(ds, propensity, scheme, p_hat)?;
    let tau = clamp_binary(ds, tau, &mut warnings);
    let kind = match (scheme, p_hat.is_some()) {
        (WeightScheme::Ow, true) => EstimatorKind::OwIpw,
        (WeightScheme::Ow, false) => EstimatorKind::Ow,
        (WeightScheme::Ipw, _) => EstimatorKind::Ipw,
    };
    let mut res = EstimateResult::new(tau, MethodSpec::new(kind), n_used);
    res.warnings = warnings;
    Ok(res)
}

fn floor_p_hat(p: f64) -> f64 {
    p.max(P_HAT_FLOOR)
}

fn hajek(
    ds: &TrialDataset,
    e: &[f64],
    scheme: WeightScheme,
    p_hat: Option<&[f64]>,
) -> Result<(f64, usize, Vec<String>)> {
    let n = ds.n();
    if e.len() != n || p_hat.is_some_and(|p| p.len() != n) {
        return Err(Error::Dimension("propensity or p_hat length".into()));
    }
    let mut warnings = Vec::new();
    let mut floored = 0;
    let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    let mut n_used = 0;
    for i in observed_rows(ds) {
        let ei = e[i];
        if !(ei > 0.0 && ei < 1.0) {
            return Err(Error::Numerical(format!("propensity {ei} outside (0, 1) at unit {i}")));
        }
        let scale = match p_hat {
            Some(p) => {
                if !(p[i] > 0.0 && p[i] <= 1.0) && p[i] != 0.0 {
                    return Err(Error::InvalidInput(format!("p_hat {} outside [0, 1]", p[i])));
                }
                if p[i] < P_HAT_FLOOR {
                    floored += 1;
                }
                1.0 / floor_p_hat(p[i])
            }
            None => 1.0,
        };
        let y = ds.outcome()[i];
        if ds.treatment()[i] == 1 {
            let w = scheme.treated_weight(ei) * scale;
            s1 += w * y;
            w1 += w;
        } else {
            let w = scheme.control_weight(ei) * scale;
            s0 += w * y;
            w0 += w;
        }
        n_used += 1;
    }
    if w1 <= 0.0 {
        return Err(Error::EmptyArm("treated (zero total weight)".into()));
    }
    if w0 <= 0.0 {
        return Err(Error::EmptyArm("control (zero total weight)".into()));
    }
    if floored > 0 {
        warnings.push(format!("{floored} observation probabilities raised to {P_HAT_FLOOR}"));
    }
    Ok((s1 / w1 - s0 / w0, n_used, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub column: String,
    pub in_roster: bool,
    pub treated_mean: f64,
    pub control_mean: f64,
    pub discrepancy: f64,
    /// Only roster columns can be flagged.
    pub flagged: bool,
    pub asd_unweighted: Option<f64>,
    pub asd_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    pub max_roster_discrepancy: f64,
    pub any_flagged: bool,
    pub converged: bool,
}

fn weighted_means(values: &[f64], z: &[u8], w: &[f64]) -> (f64, f64) {
    let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..values.len() {
        if z[i] == 1 {
            s1 += w[i] * values[i];
            w1 += w[i];
        } else {
            s0 += w[i] * values[i];
            w0 += w[i];
        }
    }
    (s1 / w1, s0 / w0)
}

fn standardized_difference(values: &[f64], z: &[u8], w: &[f64]) -> Option<f64> {
    let binary = values.iter().all(|v| *v == 0.0 || *v == 1.0);
    let mut var = [0.0; 2];
    for arm in 0..2u8 {
        let xs: Vec<f64> = values.iter().zip(z).filter(|(_, g)| **g == arm).map(|(v, _)| *v).collect();
        let n = xs.len() as f64;
        if xs.len() < 2 {
            return None;
        }
        let m = xs.iter().sum::<f64>() / n;
        let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
        var[arm as usize] = if binary { ss / n } else { ss / (n - 1.0) };
    }
    let pooled = (var[0] + var[1]) / 2.0;
    if pooled <= 0.0 {
        return None;
    }
    let (m1, m0) = weighted_means(values, z, w);
    Some((m1 - m0).abs() / pooled.sqrt())
}

/// Compares overlap-weighted arm means of every propensity-model column.
/// Columns of `cd` outside the roster are reported but never flagged.
pub fn check_exact_balance(ps: &PropensityFit, cd: &CompletedDataset) -> BalanceReport {
    let ds = cd.base();
    let z = ds.treatment();
    let e = ps.scores();
    let w: Vec<f64> = (0..ds.n())
        .map(|i| if z[i] == 1 { 1.0 - e[i] } else { e[i] })
        .collect();
    let ones = vec![1.0; ds.n()];
    let mut rows = Vec::new();
    let mut push = |label: &str, values: &[f64], in_roster: bool| {
        let (t, c) = weighted_means(values, z, &w);
        let discrepancy = (t - c).abs();
        rows.push(BalanceRow {
            column: label.to_string(),
            in_roster,
            treated_mean: t,
            control_mean: c,
            discrepancy,
            flagged: in_roster && !(discrepancy <= BALANCE_TOLERANCE),
            asd_unweighted: standardized_difference(values, z, &ones),
            asd_weighted: standardized_difference(values, z, &w),
        });
    };
    let design = ps.design();
    for j in 0..design.ncols() {
        push(&design.labels()[j], design.column(j), true);
    }
    for col in build_adjustment_columns(cd, true, false) {
        if design.column_index(&col.label).is_none() {
            push(&col.label, &col.values, false);
        }
    }
    let max_roster_discrepancy = rows
        .iter()
        .filter(|r| r.in_roster)
        .map(|r| r.discrepancy)
        .fold(0.0, f64::max);
    let any_flagged = rows.iter().any(|r| r.flagged);
    BalanceReport {
        rows,
        max_roster_discrepancy,
        any_flagged,
        converged: ps.fit.converged,
    }
}

/// Logistic model for the outcome-observation indicator, fitted on all
/// units. Partially observed covariates enter through their indicators
/// (and, under `A2`, their zero-filled values).
pub fn fit_outcome_missingness(
    cd: &CompletedDataset,
    assumption: Assumption,
    roster: OutcomeRoster,
) -> Result<OutcomeMissingnessFit> {
    let ds = cd.base();
    let n = ds.n();
    let r = ds.outcome_indicator();
    let n_obs = r.iter().filter(|v| **v == 1.0).count();
    if n_obs == 0 || n_obs == n {
        return Err(Error::Data(
            "outcome observation indicator has a single class".into(),
        ));
    }
    let zname = ds.treatment_name().to_string();
    let z = ds.treatment_f64();
    let mut terms: Vec<(String, ColumnRole, Vec<f64>)> = Vec::new();
    for cov in ds.covariates() {
        if cov.is_fully_observed() {
            terms.push((cov.name.clone(), ColumnRole::Covariate, cov.values().to_vec()));
        } else {
            terms.push((indicator_label(&cov.name), ColumnRole::Indicator, cov.indicator()));
            if assumption == Assumption::A2 {
                let zero_filled: Vec<f64> = (0..n).map(|i| cov.value(i).unwrap_or(0.0)).collect();
                terms.push((format!("{}*{}", cov.name, indicator_label(&cov.name)), ColumnRole::Covariate, zero_filled));
            }
        }
    }
    let mut design = DesignMatrix::intercept_only(n);
    match roster {
        OutcomeRoster::MainEffects => {
            for (label, role, v) in &terms {
                design.push(label, *role, v)?;
            }
            design.push(&zname, ColumnRole::Treatment, &z)?;
        }
        OutcomeRoster::TreatmentInteracted => {
            design.push(&zname, ColumnRole::Treatment, &z)?;
            for (label, _, v) in &terms {
                let zv: Vec<f64> = v.iter().zip(&z).map(|(a, b)| a * b).collect();
                design.push(interaction_label(&zname, label), ColumnRole::Interaction, &zv)?;
            }
        }
    }
    let fit = fit_logistic_irls(&design, &r, None)?;
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push("outcome missingness model did not converge".to_string());
    }
    for d in &fit.dropped_columns {
        warnings.push(format!("missingness column '{d}' dropped (rank deficient)"));
    }
    let n_floored = fit
        .fitted_probabilities
        .iter()
        .filter(|p| **p < P_HAT_FLOOR)
        .count();
    if n_floored > 0 {
        log::warn!("{n_floored} observation probabilities below {P_HAT_FLOOR} were raised to the floor");
        warnings.push(format!("{n_floored} observation probabilities raised to {P_HAT_FLOOR}"));
    }
    let p_hat = fit.fitted_probabilities.iter().map(|p| floor_p_hat(*p)).collect();
    Ok(OutcomeMissingnessFit {
        assumption,
        roster_kind: roster,
        fit,
        design,
        p_hat,
        n_floored,
        warnings,
    })
}

/// Impute, model outcome missingness, fit the working propensity score and
/// evaluate the overlap-weighted Hajek estimator with `1 / p_hat` factors.
pub fn ow_ipw_estimate(
    ds: &TrialDataset,
    imputation: &ImputationSpec,
    include_msi: bool,
    assumption: Assumption,
) -> Result<EstimateResult> {
    let spec = MethodSpec::new(EstimatorKind::OwIpw)
        .imputation(imputation.clone())
        .msi(include_msi)
        .assumption(assumption);
    estimate(ds, &spec)
}

/// The three complete-case analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompleteCaseMode {
    CompleteUnit,
    CompleteCovariate,
    CompleteOutcome,
}

pub fn complete_case_estimators(
    ds: &TrialDataset,
    mode: CompleteCaseMode,
    adjustment: EstimatorKind,
) -> Result<EstimateResult> {
    let kind = match mode {
        CompleteCaseMode::CompleteUnit => EstimatorKind::CompleteUnit,
        CompleteCaseMode::CompleteCovariate => EstimatorKind::CompleteCovariate,
        CompleteCaseMode::CompleteOutcome => EstimatorKind::CompleteOutcome,
    };
    estimate(ds, &MethodSpec::new(kind).adjustment(adjustment))
}

/// Runs a method and attaches its analytic variance.
pub fn estimate(ds: &TrialDataset, spec: &MethodSpec) -> Result<EstimateResult> {
    estimate_views(ds, ds, spec, true)
}

/// Point estimate only.
pub fn estimate_point(ds: &TrialDataset, spec: &MethodSpec) -> Result<f64> {
    Ok(estimate_views(ds, ds, spec, false)?.tau_hat)
}

/// Runs a method where the outcome-missingness model is fitted on
/// `observed` and every other step on `adjustment_view`. The two datasets
/// must share units, treatment and outcomes; they may differ in which
/// covariate entries are observed.
pub fn estimate_views(
    observed: &TrialDataset,
    adjustment_view: &TrialDataset,
    spec: &MethodSpec,
    with_variance: bool,
) -> Result<EstimateResult> {
    spec.validate()?;
    if observed.n() != adjustment_view.n() || observed.treatment() != adjustment_view.treatment() {
        return Err(Error::Dimension("views disagree on units or treatment".into()));
    }
    let adj_ds = match &spec.covariates {
        Some(names) => adjustment_view.select_covariates(names)?,
        None => adjustment_view.clone(),
    };
    let mut res = match spec.estimator {
        EstimatorKind::Unadjusted => {
            let (tau, var) = unadjusted_parts(&adj_ds)?;
            let mut res = EstimateResult::new(tau, spec.clone(), observed_rows(&adj_ds).len());
            if with_variance {
                res.variance.insert(VarianceKind::HcRobust, var);
            }
            res
        }
        EstimatorKind::Ancova => {
            let cd = impute(&adj_ds, &spec.imputation)?;
            ancova_with(&cd, spec.clone(), with_variance)?
        }
        EstimatorKind::Ow | EstimatorKind::Ipw => {
            let scheme = if spec.estimator == EstimatorKind::Ow {
                WeightScheme::Ow
            } else {
                WeightScheme::Ipw
            };
            let cd = impute(&adj_ds, &spec.imputation)?;
            weighting_pipeline(&cd, None, scheme, spec, with_variance)?
        }
        EstimatorKind::OwIpw | EstimatorKind::Wls => {
            let om = if observed.has_missing_outcomes() {
                let cd_obs = impute(observed, &spec.imputation)?;
                Some(fit_outcome_missingness(&cd_obs, spec.assumption, spec.roster)?)
            } else {
                None
            };
            let cd = impute(&adj_ds, &spec.imputation)?;
            let mut res = if spec.estimator == EstimatorKind::OwIpw {
                weighting_pipeline(&cd, om.as_ref(), WeightScheme::Ow, spec, with_variance)?
            } else {
                let ones = vec![1.0; cd.base().n()];
                let p = om.as_ref().map_or(&ones, |m| &m.p_hat);
                wls_with(&cd, p, spec.clone(), with_variance)?
            };
            if let Some(m) = &om {
                res.warnings.extend(m.warnings.iter().cloned());
                res.provenance.outcome_missingness_model = Some(ModelSummary::from_fit(&m.fit));
            }
            res
        }
        EstimatorKind::CompleteUnit | EstimatorKind::CompleteCovariate | EstimatorKind::CompleteOutcome => {
            complete_case(&adj_ds, spec, with_variance)?
        }
    };
    res.method = spec.clone();
    Ok(res)
}

fn weighting_pipeline(
    cd: &CompletedDataset,
    om: Option<&OutcomeMissingnessFit>,
    scheme: WeightScheme,
    spec: &MethodSpec,
    with_variance: bool,
) -> Result<EstimateResult> {
    let ds = cd.base();
    let ps = fit_treatment_ps(cd, spec.include_msi)?;
    let p_hat = om.map(|m| m.p_hat.as_slice());
    let (tau, n_used, mut warnings) = hajek(ds, ps.scores(), scheme, p_hat)?;
    let tau = clamp_binary(ds, tau, &mut warnings);
    let mut res = EstimateResult::new(tau, spec.clone(), n_used);
    if with_variance {
        let v = sandwich_variance(ds, &ps, scheme, om, PropensityTreatment::Estimated)?;
        res.variance.insert(VarianceKind::Sandwich, v);
    }
    warnings.extend(ps.warnings.iter().cloned());
    res.warnings = warnings;
    res.provenance = Provenance {
        imputation: cd.records().to_vec(),
        adjustment_columns: ps.roster()[1..].to_vec(),
        dropped_columns: ps.fit.dropped_columns.clone(),
        treatment_model: Some(ModelSummary::from_fit(&ps.fit)),
        ..Provenance::default()
    };
    Ok(res)
}

fn complete_case(ds: &TrialDataset, spec: &MethodSpec, with_variance: bool) -> Result<EstimateResult> {
    let adjustment = spec.resolved_adjustment();
    let inner = MethodSpec {
        estimator: adjustment,
        adjustment: None,
        covariates: None,
        ..spec.clone()
    };
    let (subset, note) = match spec.estimator {
        EstimatorKind::CompleteUnit => {
            let flags = ds.complete_unit_flags();
            let rows: Vec<usize> = (0..ds.n()).filter(|&i| flags[i]).collect();
            if rows.is_empty() {
                return Err(Error::Data("no unit has every covariate observed".into()));
            }
            let note = format!("{} units with a missing covariate dropped", ds.n() - rows.len());
            (ds.select_rows(&rows)?, note)
        }
        EstimatorKind::CompleteCovariate => {
            let keep: Vec<String> = ds
                .covariates()
                .iter()
                .filter(|c| c.is_fully_observed())
                .map(|c| c.name.clone())
                .collect();
            let note = format!(
                "{} partially observed covariates dropped",
                ds.covariates().len() - keep.len()
            );
            (ds.select_covariates(&keep)?, note)
        }
        _ => {
            let rows = observed_rows(ds);
            if rows.is_empty() {
                return Err(Error::Data("no unit has an observed outcome".into()));
            }
            let note = format!("{} units with a missing outcome dropped", ds.n() - rows.len());
            (ds.select_rows(&rows)?, note)
        }
    };
    let mut res = estimate_views(&subset, &subset, &inner, with_variance)?;
    res.warnings.insert(0, note);
    Ok(res)
}
