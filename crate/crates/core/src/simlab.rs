//! Simulation lab: data-generating processes, missingness mechanisms, the
//! Monte Carlo driver, bundled table presets and the pseudo-covariate
//! efficiency probe.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, CovariateKind, OutcomeKind, TrialDataset};
use crate::error::{Error, Result};
use crate::estimators::{
    ancova_lin, estimate_views, unadjusted, EstimatorKind, MethodSpec, OutcomeRoster, VarianceKind,
};
use crate::inference::{bootstrap_variance, replicate_rng, sample_variance, BootstrapPlan};
use crate::missing::{impute, ImputationSpec};
use crate::numerics::expit;

/// Seed of the fixed covariate sample used for intercept calibration.
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;
const CALIBRATION_DRAWS: usize = 100_000;
const TRUE_TAU_DRAWS: usize = 1_000_000;

/// Share of failed replicates above which a method is flagged.
pub const FAILURE_FLAG_SHARE: f64 = 0.05;

pub const PARTIAL_COVARIATE: &str = "x1";

fn neg_one() -> f64 {
    -1.0
}

fn neg_one_pair() -> [f64; 2] {
    [-1.0, -1.0]
}

/// Mechanism making `x1` unobserved. Slopes act on the observation
/// log-odds: MAR on `(x2, x3)`, MNAR on `x1` itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CovMechanism {
    Mcar,
    Mar {
        #[serde(default = "neg_one_pair")]
        slopes: [f64; 2],
    },
    Mnar {
        #[serde(default = "neg_one")]
        slope: f64,
    },
}

impl CovMechanism {
    pub fn mar() -> Self {
        CovMechanism::Mar { slopes: neg_one_pair() }
    }

    pub fn mnar() -> Self {
        CovMechanism::Mnar { slope: -1.0 }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            CovMechanism::Mcar => "mcar",
            CovMechanism::Mar { .. } => "mar",
            CovMechanism::Mnar { .. } => "mnar",
        }
    }

    /// Linear predictor without intercept.
    fn slope_term(&self, x1: f64, x2: f64, x3: f64) -> f64 {
        match self {
            CovMechanism::Mcar => 0.0,
            CovMechanism::Mar { slopes } => slopes[0] * x2 + slopes[1] * x3,
            CovMechanism::Mnar { slope } => slope * x1,
        }
    }
}

fn half() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn default_correlation() -> f64 {
    0.3
}
fn default_reps() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    pub outcome_kind: OutcomeKind,
    /// Randomization probability.
    #[serde(default = "half")]
    pub r: f64,
    pub alpha: f64,
    pub beta0: f64,
    pub beta1: [f64; 3],
    pub beta2: [f64; 3],
    /// Residual variance, continuous outcomes only.
    #[serde(default = "one")]
    pub sigma_y2: f64,
    #[serde(default = "default_correlation")]
    pub covariate_correlation: f64,
    pub cov_missingness: CovMechanism,
    pub target_missing_rate: f64,
    /// `(intercept, Z, Z*R*, Z*x2, Z*x3)` on the outcome-observation log-odds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_missingness: Option<[f64; 5]>,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn continuous(n: usize) -> Self {
        Scenario {
            name: None,
            n,
            outcome_kind: OutcomeKind::Continuous,
            r: 0.5,
            alpha: 0.0,
            beta0: 0.8,
            beta1: [3.0, 0.3, 0.42],
            beta2: [0.75, 0.53, 0.38],
            sigma_y2: 1.0,
            covariate_correlation: 0.3,
            cov_missingness: CovMechanism::Mcar,
            target_missing_rate: 0.3,
            outcome_missingness: None,
            replications: default_reps(),
            seed: 0,
        }
    }

    pub fn binary(n: usize) -> Self {
        Scenario {
            outcome_kind: OutcomeKind::Binary,
            beta0: 0.0,
            beta1: [4.0, 1.0, 1.0],
            beta2: [-3.5, 0.3, 0.3],
            ..Scenario::continuous(n)
        }
    }

    pub fn mechanism(mut self, m: CovMechanism, rate: f64) -> Self {
        self.cov_missingness = m;
        self.target_missing_rate = rate;
        self
    }

    pub fn outcome_missingness(mut self, theta: [f64; 5]) -> Self {
        self.outcome_missingness = Some(theta);
        self
    }

    pub fn replications(mut self, reps: usize) -> Self {
        self.replications = reps;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config("scenario n must be at least 4".into()));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config("randomization probability must lie in (0, 1)".into()));
        }
        if self.outcome_kind == OutcomeKind::Continuous && !(self.sigma_y2 > 0.0) {
            return Err(Error::Config("sigma_y2 must be positive".into()));
        }
        if !(self.target_missing_rate > 0.0 && self.target_missing_rate < 1.0) {
            return Err(Error::Config("target missing rate must lie in (0, 1)".into()));
        }
        if !(self.covariate_correlation.abs() < 1.0) {
            return Err(Error::Config("covariate correlation must lie in (-1, 1)".into()));
        }
        if self.replications < 2 {
            return Err(Error::Config("need at least 2 replications".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let sc: Scenario = serde_json::from_str(&text)?;
        sc.validate()?;
        Ok(sc)
    }
}

/// A generated trial with both potential outcomes kept for truth checks.
#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub data: TrialDataset,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

fn draw_covariates<R: Rng>(n: usize, corr: f64, rng: &mut R) -> [Vec<f64>; 3] {
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut x3 = Vec::with_capacity(n);
    let s = (1.0 - corr * corr).sqrt();
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        x1.push(a);
        x2.push(corr * a + s * b);
        x3.push(if rng.random::<f64>() < 0.5 { 0.5 } else { -0.5 });
    }
    [x1, x2, x3]
}

fn draw_treatment<R: Rng>(n: usize, r: f64, rng: &mut R) -> Vec<u8> {
    loop {
        let z: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < r)).collect();
        if z.contains(&0) && z.contains(&1) {
            return z;
        }
    }
}

fn linear_parts(sc: &Scenario, x: &[Vec<f64>; 3], i: usize) -> (f64, f64) {
    let main: f64 = (0..3).map(|j| sc.beta1[j] * x[j][i]).sum();
    let inter: f64 = (0..3).map(|j| sc.beta2[j] * x[j][i]).sum();
    let eta0 = sc.beta0 + main;
    (eta0 + sc.alpha + inter, eta0)
}

fn assemble(x: [Vec<f64>; 3], z: Vec<u8>, kind: OutcomeKind, y: Vec<f64>) -> Result<TrialDataset> {
    let [x1, x2, x3] = x;
    let covs = vec![
        Covariate::complete(PARTIAL_COVARIATE, CovariateKind::Continuous, x1)?,
        Covariate::complete("x2", CovariateKind::Continuous, x2)?,
        Covariate::complete("x3", CovariateKind::Binary, x3)?,
    ];
    TrialDataset::new(z, kind, y.into_iter().map(Some).collect(), covs)
}

/// Linear outcome model with treatment interactions and normal noise.
pub fn gen_continuous<R: Rng>(sc: &Scenario, rng: &mut R) -> Result<SimulatedTrial> {
    if sc.outcome_kind != OutcomeKind::Continuous {
        return Err(Error::Config("gen_continuous needs a continuous scenario".into()));
    }
    let n = sc.n;
    let x = draw_covariates(n, sc.covariate_correlation, rng);
    let z = draw_treatment(n, sc.r, rng);
    let sd = sc.sigma_y2.sqrt();
    let (mut y1, mut y0, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (m1, m0) = linear_parts(sc, &x, i);
        let e1: f64 = rng.sample(StandardNormal);
        let e0: f64 = rng.sample(StandardNormal);
        y1.push(m1 + sd * e1);
        y0.push(m0 + sd * e0);
        y.push(if z[i] == 1 { y1[i] } else { y0[i] });
    }
    Ok(SimulatedTrial {
        data: assemble(x, z, OutcomeKind::Continuous, y)?,
        y1,
        y0,
    })
}

/// Logistic outcome model on the same linear predictor.
pub fn gen_binary<R: Rng>(sc: &Scenario, rng: &mut R) -> Result<SimulatedTrial> {
    if sc.outcome_kind != OutcomeKind::Binary {
        return Err(Error::Config("gen_binary needs a binary scenario".into()));
    }
    let n = sc.n;
    let x = draw_covariates(n, sc.covariate_correlation, rng);
    let z = draw_treatment(n, sc.r, rng);
    let (mut y1, mut y0, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (m1, m0) = linear_parts(sc, &x, i);
        let u1: f64 = rng.random();
        let u0: f64 = rng.random();
        y1.push(f64::from(u8::from(u1 < expit(m1))));
        y0.push(f64::from(u8::from(u0 < expit(m0))));
        y.push(if z[i] == 1 { y1[i] } else { y0[i] });
    }
    Ok(SimulatedTrial {
        data: assemble(x, z, OutcomeKind::Binary, y)?,
        y1,
        y0,
    })
}

pub fn generate<R: Rng>(sc: &Scenario, rng: &mut R) -> Result<SimulatedTrial> {
    match sc.outcome_kind {
        OutcomeKind::Continuous => gen_continuous(sc, rng),
        OutcomeKind::Binary => gen_binary(sc, rng),
    }
}

/// Population average treatment effect of a scenario. Exact for continuous
/// outcomes; for binary outcomes an antithetic Monte Carlo average of the
/// probability contrast over a fixed covariate sample.
pub fn true_tau(sc: &Scenario) -> f64 {
    match sc.outcome_kind {
        OutcomeKind::Continuous => sc.alpha,
        OutcomeKind::Binary => {
            let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED ^ 0x7a);
            let half_draws = TRUE_TAU_DRAWS / 2;
            let x = draw_covariates(half_draws, sc.covariate_correlation, &mut rng);
            let neg: [Vec<f64>; 3] = [
                x[0].iter().map(|v| -v).collect(),
                x[1].iter().map(|v| -v).collect(),
                x[2].iter().map(|v| -v).collect(),
            ];
            let mut total = 0.0;
            for xs in [&x, &neg] {
                for i in 0..half_draws {
                    let (m1, m0) = linear_parts(sc, xs, i);
                    total += expit(m1) - expit(m0);
                }
            }
            total / (2 * half_draws) as f64
        }
    }
}

/// Intercept `c` with `mean(expit(c + lp)) = 1 - target_rate`, by bisection.
pub fn calibrate_intercept_on(linear_predictor: &[f64], target_rate: f64) -> Result<f64> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Config(format!("target missing rate {target_rate} outside (0, 1)")));
    }
    let goal = 1.0 - target_rate;
    let rate = |c: f64| linear_predictor.iter().map(|v| expit(c + v)).sum::<f64>() / linear_predictor.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate(lo) > goal || rate(hi) < goal {
        return Err(Error::Numerical(format!("cannot bracket intercept for missing rate {target_rate}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < goal {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Intercept hitting `target_rate` under the scenario covariate law. For
/// MCAR this is the observation probability `q` itself.
pub fn calibrate_intercept(mechanism: &CovMechanism, target_rate: f64, correlation: f64) -> Result<f64> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Config(format!("target missing rate {target_rate} outside (0, 1)")));
    }
    if let CovMechanism::Mcar = mechanism {
        return Ok(1.0 - target_rate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let x = draw_covariates(CALIBRATION_DRAWS, correlation, &mut rng);
    let lp: Vec<f64> = (0..CALIBRATION_DRAWS)
        .map(|i| mechanism.slope_term(x[0][i], x[1][i], x[2][i]))
        .collect();
    calibrate_intercept_on(&lp, target_rate)
}

/// A mechanism with its intercept fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibratedMechanism {
    pub mechanism: CovMechanism,
    pub intercept: f64,
    pub target_rate: f64,
}

impl CalibratedMechanism {
    pub fn new(mechanism: CovMechanism, target_rate: f64, correlation: f64) -> Result<Self> {
        Ok(CalibratedMechanism {
            mechanism,
            intercept: calibrate_intercept(&mechanism, target_rate, correlation)?,
            target_rate,
        })
    }

    pub fn for_scenario(sc: &Scenario) -> Result<Self> {
        Self::new(sc.cov_missingness, sc.target_missing_rate, sc.covariate_correlation)
    }

    pub fn observe_probability(&self, x1: f64, x2: f64, x3: f64) -> f64 {
        match self.mechanism {
            CovMechanism::Mcar => self.intercept,
            m => expit(self.intercept + m.slope_term(x1, x2, x3)),
        }
    }
}

fn covariate_values<'a>(ds: &'a TrialDataset, name: &str) -> Result<&'a [f64]> {
    ds.covariate(name)
        .map(|c| c.values())
        .ok_or_else(|| Error::InvalidInput(format!("dataset lacks covariate '{name}'")))
}

/// Masks `x1` according to the calibrated mechanism.
pub fn apply_cov_missingness<R: Rng>(ds: &TrialDataset, cm: &CalibratedMechanism, rng: &mut R) -> Result<TrialDataset> {
    let x1 = covariate_values(ds, PARTIAL_COVARIATE)?;
    let x2 = covariate_values(ds, "x2")?;
    let x3 = covariate_values(ds, "x3")?;
    let observed: Vec<bool> = (0..ds.n())
        .map(|i| rng.random::<f64>() < cm.observe_probability(x1[i], x2[i], x3[i]))
        .collect();
    ds.mask_covariate(PARTIAL_COVARIATE, &observed)
}

/// Masks outcomes with observation log-odds
/// `t0 + tZ*Z + tZR*Z*R* + tZ2*Z*x2 + tZ3*Z*x3`, where `R*` is the
/// sample-centered observation indicator of `x1`.
pub fn apply_outcome_missingness<R: Rng>(ds: &TrialDataset, theta: &[f64; 5], rng: &mut R) -> Result<TrialDataset> {
    let r = ds
        .covariate(PARTIAL_COVARIATE)
        .ok_or_else(|| Error::InvalidInput(format!("dataset lacks covariate '{PARTIAL_COVARIATE}'")))?
        .indicator();
    let r_bar = r.iter().sum::<f64>() / r.len() as f64;
    let x2 = covariate_values(ds, "x2")?;
    let x3 = covariate_values(ds, "x3")?;
    let z = ds.treatment();
    let observed: Vec<bool> = (0..ds.n())
        .map(|i| {
            let zi = z[i] as f64;
            let eta = theta[0] + zi * (theta[1] + theta[2] * (r[i] - r_bar) + theta[3] * x2[i] + theta[4] * x3[i]);
            rng.random::<f64>() < expit(eta)
        })
        .collect();
    ds.mask_outcome(&observed)
}

/// Which covariates a method sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataView {
    /// Covariates after masking.
    #[default]
    Observed,
    /// Covariates before masking. Outcome masking still applies.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMethod {
    pub label: String,
    pub spec: MethodSpec,
    #[serde(default)]
    pub view: DataView,
}

impl SimMethod {
    pub fn new(label: impl Into<String>, spec: MethodSpec) -> Self {
        SimMethod {
            label: label.into(),
            spec,
            view: DataView::Observed,
        }
    }

    pub fn full(mut self) -> Self {
        self.view = DataView::Full;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub label: String,
    pub estimator: String,
    pub view: DataView,
    /// Signed: mean estimate minus the true effect.
    pub bias: f64,
    pub bias_se: f64,
    pub mc_variance: f64,
    pub relative_efficiency: f64,
    pub failures: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub scenario: Scenario,
    pub reference: String,
    pub true_tau: f64,
    pub replications_requested: usize,
    /// Replicates where every method succeeded.
    pub replications_completed: usize,
    pub mean_covariate_missing_rate: f64,
    pub mean_outcome_missing_rate: f64,
    pub calibrated_intercept: f64,
    pub rows: Vec<MethodSummary>,
}

impl MonteCarloReport {
    pub fn row(&self, label: &str) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn csv_header() -> &'static str {
        "scenario,method,estimator,view,bias,bias_se,mc_variance,relative_efficiency,failures,flagged,replications"
    }

    /// CSV rows without header.
    pub fn csv_rows(&self) -> String {
        let name = self.scenario.name.clone().unwrap_or_default();
        let mut out = String::new();
        for r in &self.rows {
            let view = match r.view {
                DataView::Observed => "observed",
                DataView::Full => "full",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_escape(&name),
                csv_escape(&r.label),
                r.estimator,
                view,
                r.bias,
                r.bias_se,
                r.mc_variance,
                r.relative_efficiency,
                r.failures,
                r.flagged,
                self.replications_completed
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::csv_header(), self.csv_rows())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

struct ReplicateOutcome {
    taus: Vec<Option<f64>>,
    cov_missing: f64,
    outcome_missing: f64,
}

fn run_replicate(
    sc: &Scenario,
    cm: &CalibratedMechanism,
    methods: &[SimMethod],
    index: u64,
) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(sc.seed, index);
    let trial = generate(sc, &mut rng)?;
    let full = trial.data;
    let mut observed = apply_cov_missingness(&full, cm, &mut rng)?;
    let mut full_view = full.clone();
    if let Some(theta) = &sc.outcome_missingness {
        observed = apply_outcome_missingness(&observed, theta, &mut rng)?;
        full_view = full_view.mask_outcome(observed.outcome_observed())?;
    }
    let n = full.n() as f64;
    let cov_missing = 1.0 - observed.covariate(PARTIAL_COVARIATE).unwrap().n_observed() as f64 / n;
    let outcome_missing = observed.outcome_observed().iter().filter(|o| !**o).count() as f64 / n;
    let taus = methods
        .iter()
        .map(|m| {
            let view = match m.view {
                DataView::Observed => &observed,
                DataView::Full => &full_view,
            };
            estimate_views(&observed, view, &m.spec, false)
                .ok()
                .map(|r| r.tau_hat)
                .filter(|t| t.is_finite())
        })
        .collect();
    Ok(ReplicateOutcome {
        taus,
        cov_missing,
        outcome_missing,
    })
}

/// Runs every method on the same generated datasets. Replicates where any
/// method fails are dropped for all methods.
pub fn run_monte_carlo(sc: &Scenario, methods: &[SimMethod], reference: &str) -> Result<MonteCarloReport> {
    sc.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods given".into()));
    }
    let ref_idx = methods
        .iter()
        .position(|m| m.label == reference)
        .ok_or_else(|| Error::Config(format!("reference method '{reference}' is not in the method list")))?;
    for m in methods {
        m.spec.validate()?;
    }
    let cm = CalibratedMechanism::for_scenario(sc)?;
    let tau_true = true_tau(sc);
    let done = AtomicUsize::new(0);
    let total = sc.replications;
    let outcomes: Vec<ReplicateOutcome> = (0..total)
        .into_par_iter()
        .map(|b| {
            let out = run_replicate(sc, &cm, methods, b as u64);
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            if k % 100 == 0 || k == total {
                log::info!("{}: {k}/{total} replicates", sc.name.as_deref().unwrap_or("scenario"));
            }
            out
        })
        .collect::<Result<Vec<_>>>()?;

    let complete: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.taus.iter().all(Option::is_some)).collect();
    let kept = complete.len();
    if kept < 2 {
        return Err(Error::Numerical("fewer than two replicates succeeded for every method".into()));
    }
    let series = |j: usize| -> Vec<f64> { complete.iter().map(|o| o.taus[j].unwrap()).collect() };
    let ref_var = sample_variance(&series(ref_idx));
    let rows = methods
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let xs = series(j);
            let mean = xs.iter().sum::<f64>() / kept as f64;
            let var = sample_variance(&xs);
            let failures = outcomes.iter().filter(|o| o.taus[j].is_none()).count();
            let flagged = failures as f64 > FAILURE_FLAG_SHARE * total as f64;
            if flagged {
                log::warn!("method '{}' failed in {failures} of {total} replicates", m.label);
            }
            MethodSummary {
                label: m.label.clone(),
                estimator: m.spec.estimator.to_string(),
                view: m.view,
                bias: mean - tau_true,
                bias_se: (var / kept as f64).sqrt(),
                mc_variance: var,
                relative_efficiency: if j == ref_idx { 1.0 } else { ref_var / var },
                failures,
                flagged,
            }
        })
        .collect();
    let mean_of = |f: fn(&ReplicateOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64;
    Ok(MonteCarloReport {
        scenario: sc.clone(),
        reference: reference.to_string(),
        true_tau: tau_true,
        replications_requested: total,
        replications_completed: kept,
        mean_covariate_missing_rate: mean_of(|o| o.cov_missing),
        mean_outcome_missing_rate: mean_of(|o| o.outcome_missing),
        calibrated_intercept: cm.intercept,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Bundled presets

const REFERENCE_TABLE: &str = include_str!("reference_values.tsv");

/// One published cell: bias magnitude and relative efficiency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceValue {
    pub table: u8,
    pub n: usize,
    pub outcome: OutcomeKind,
    pub missing_pct: u32,
    pub mechanism: String,
    pub row: String,
    /// "ancova" or "ow" for the fully observed outcome tables.
    pub adjuster: Option<String>,
    pub bias: f64,
    pub re: f64,
}

impl ReferenceValue {
    pub fn method_label(&self) -> String {
        match self.adjuster.as_deref() {
            Some(a) => adjusted_label(&self.row, a),
            None => self.row.clone(),
        }
    }

    pub fn preset_name(&self) -> String {
        preset_name(self.table, &self.mechanism, self.missing_pct, self.n)
    }
}

pub fn reference_values() -> Vec<ReferenceValue> {
    REFERENCE_TABLE
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            ReferenceValue {
                table: f[0].parse().unwrap(),
                n: f[1].parse().unwrap(),
                outcome: if f[2] == "binary" { OutcomeKind::Binary } else { OutcomeKind::Continuous },
                missing_pct: f[3].parse().unwrap(),
                mechanism: f[4].to_string(),
                row: f[5].to_string(),
                adjuster: (f[6] != "-").then(|| f[6].to_string()),
                bias: f[7].parse().unwrap(),
                re: f[8].parse().unwrap(),
            }
        })
        .collect()
}

pub const UNADJUSTED_LABEL: &str = "Unadjusted";
pub const IPW_REFERENCE_LABEL: &str = "IPW w/o cov. adj.";

fn adjusted_label(row: &str, adjuster: &str) -> String {
    let tag = if adjuster == "ow" { "OW" } else { "ANCOVA" };
    format!("{row} ({tag})")
}

pub fn preset_name(table: u8, mechanism: &str, missing_pct: u32, n: usize) -> String {
    format!("table{table}_{mechanism}{missing_pct}_n{n}")
}

const IMPUTATION_ROWS: [(&str, &str); 3] = [
    ("Mean imputation", "mean"),
    ("Correct model imputation", "median;model:x1~x2"),
    ("Wrong model imputation", "median;model:x1~sq(x2)+x3"),
];

fn imputation_rows() -> Vec<(String, ImputationSpec, bool)> {
    let mut rows = Vec::new();
    for (name, spec) in IMPUTATION_ROWS {
        let spec: ImputationSpec = spec.parse().expect("bundled imputation spec");
        rows.push((format!("{name} w/o MSI"), spec.clone(), false));
        rows.push((format!("{name} w/ MSI"), spec, true));
    }
    rows
}

/// Methods of the fully observed outcome tables, with the unadjusted
/// estimator first.
pub fn covariate_table_methods() -> Vec<SimMethod> {
    let mut out = vec![SimMethod::new(UNADJUSTED_LABEL, MethodSpec::new(EstimatorKind::Unadjusted))];
    for (adj, kind) in [("ancova", EstimatorKind::Ancova), ("ow", EstimatorKind::Ow)] {
        out.push(SimMethod::new(adjusted_label("Full data", adj), MethodSpec::new(kind).msi(false)).full());
        out.push(SimMethod::new(
            adjusted_label("Complete covariate", adj),
            MethodSpec::new(EstimatorKind::CompleteCovariate).adjustment(kind),
        ));
        out.push(SimMethod::new(
            adjusted_label("Complete unit", adj),
            MethodSpec::new(EstimatorKind::CompleteUnit).adjustment(kind),
        ));
        for (row, spec, msi) in imputation_rows() {
            out.push(SimMethod::new(adjusted_label(&row, adj), MethodSpec::new(kind).imputation(spec).msi(msi)));
        }
    }
    out
}

/// Methods of the missing outcome tables, with the reference second.
pub fn outcome_table_methods() -> Vec<SimMethod> {
    let ow_ipw = || MethodSpec::new(EstimatorKind::OwIpw).roster(OutcomeRoster::TreatmentInteracted);
    let mut out = vec![
        SimMethod::new(
            "Complete outcome w/o cov. adj.",
            MethodSpec::new(EstimatorKind::CompleteOutcome).adjustment(EstimatorKind::Unadjusted),
        ),
        SimMethod::new(IPW_REFERENCE_LABEL, ow_ipw().covariates(Vec::<String>::new())),
        SimMethod::new("IPW & Full X", ow_ipw().msi(false)).full(),
        SimMethod::new("IPW & Complete covariate", ow_ipw().covariates(["x2", "x3"])),
    ];
    for (row, spec, msi) in imputation_rows() {
        out.push(SimMethod::new(format!("IPW & {row}"), ow_ipw().imputation(spec).msi(msi)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preset {
    pub name: String,
    pub table: u8,
    pub scenario: Scenario,
    pub methods: Vec<SimMethod>,
    pub reference: String,
}

/// Standard outcome-observation coefficients of the missing outcome tables.
pub const OUTCOME_THETA: [f64; 5] = [0.8, 1.0, 1.0, 1.0, 1.0];

fn build_preset(table: u8, mechanism: &str, pct: u32) -> Option<Preset> {
    let n = if table % 2 == 1 { 100 } else { 500 };
    let mech = match mechanism {
        "mcar" => CovMechanism::Mcar,
        "mar" => CovMechanism::mar(),
        "mnar" => CovMechanism::mnar(),
        _ => return None,
    };
    if pct != 10 && pct != 30 {
        return None;
    }
    let name = preset_name(table, mechanism, pct, n);
    let base = match table {
        1 | 2 | 5 | 6 => Scenario::continuous(n),
        3 | 4 => Scenario::binary(n),
        _ => return None,
    };
    let mut scenario = base.mechanism(mech, pct as f64 / 100.0).named(&name);
    let (methods, reference) = if table >= 5 {
        scenario = scenario.outcome_missingness(OUTCOME_THETA);
        (outcome_table_methods(), IPW_REFERENCE_LABEL.to_string())
    } else {
        (covariate_table_methods(), UNADJUSTED_LABEL.to_string())
    };
    Some(Preset {
        name,
        table,
        scenario,
        methods,
        reference,
    })
}

pub fn preset_names() -> Vec<String> {
    table_presets_all().into_iter().map(|p| p.name).collect()
}

fn table_presets_all() -> Vec<Preset> {
    (1..=6).flat_map(table_presets).collect()
}

/// The six scenarios (two missing rates, three mechanisms) of one table.
pub fn table_presets(table: u8) -> Vec<Preset> {
    let mut out = Vec::new();
    for pct in [30, 10] {
        for mech in ["mcar", "mar", "mnar"] {
            if let Some(p) = build_preset(table, mech, pct) {
                out.push(p);
            }
        }
    }
    out
}

pub fn preset(name: &str) -> Result<Preset> {
    table_presets_all()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown preset '{name}'; valid: {}", preset_names().join(", "))))
}

/// Published value next to a reproduced one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub method: String,
    pub metric: String,
    pub published: f64,
    pub reproduced: f64,
    /// `reproduced / published`, absent when the published value is 0.
    pub ratio: Option<f64>,
}

impl ComparisonRow {
    pub fn csv_header() -> &'static str {
        "scenario,method,metric,published,reproduced,ratio"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            csv_escape(&self.scenario),
            csv_escape(&self.method),
            self.metric,
            self.published,
            self.reproduced,
            self.ratio.map_or(String::new(), |r| r.to_string())
        )
    }
}

/// Pairs a report with the published cells of its preset. Published bias
/// values are magnitudes, so the reproduced bias is compared in absolute
/// value.
pub fn compare_with_reference(report: &MonteCarloReport, preset: &Preset) -> Vec<ComparisonRow> {
    let mut out = Vec::new();
    for rv in reference_values().into_iter().filter(|r| r.preset_name() == preset.name) {
        let label = rv.method_label();
        let Some(row) = report.row(&label) else { continue };
        for (metric, published, reproduced) in [
            ("bias", rv.bias, row.bias.abs()),
            ("re", rv.re, row.relative_efficiency),
        ] {
            out.push(ComparisonRow {
                scenario: preset.name.clone(),
                method: label.clone(),
                metric: metric.to_string(),
                published,
                reproduced,
                ratio: (published != 0.0).then(|| reproduced / published),
            });
        }
    }
    out
}

/// Runs every scenario of a table and pairs each cell with its published
/// value. Reports are returned alongside for further inspection.
pub fn reproduce_table(table: u8, replications: usize, seed: u64) -> Result<(Vec<ComparisonRow>, Vec<MonteCarloReport>)> {
    let presets = table_presets(table);
    if presets.is_empty() {
        return Err(Error::Config(format!("no table {table}; valid tables are 1 to 6")));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for p in presets {
        let sc = p.scenario.clone().replications(replications).seed(seed);
        let report = run_monte_carlo(&sc, &p.methods, &p.reference)?;
        rows.extend(compare_with_reference(&report, &p));
        reports.push(report);
    }
    Ok((rows, reports))
}

// ---------------------------------------------------------------------------
// Pseudo-covariate efficiency probe

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMechanism {
    Mcar,
    /// Observation log-odds `delta0 + x`, with `delta0` calibrated per draw.
    Mnar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ProbeVariance {
    /// Heteroskedasticity-robust (HC0) variance of each fit.
    Robust,
    Bootstrap { replicates: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub rhos: Vec<f64>,
    pub missing: Vec<f64>,
    pub mechanism: ProbeMechanism,
    pub repetitions: usize,
    pub seed: u64,
    pub variance: ProbeVariance,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            rhos: (1..=9).map(|k| k as f64 / 10.0).collect(),
            missing: (0..=5).map(|k| k as f64 / 10.0).collect(),
            mechanism: ProbeMechanism::Mcar,
            repetitions: 500,
            seed: 0,
            variance: ProbeVariance::Robust,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rhos.is_empty() || self.missing.is_empty() {
            return Err(Error::Config("probe grids must be nonempty".into()));
        }
        if let Some(r) = self.rhos.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::Config(format!("rho {r} outside (0, 1)")));
        }
        if let Some(m) = self.missing.iter().find(|m| !(**m >= 0.0 && **m < 1.0)) {
            return Err(Error::Config(format!("missing proportion {m} outside [0, 1)")));
        }
        if self.repetitions < 2 {
            return Err(Error::Config("probe needs at least 2 repetitions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeCell {
    pub mechanism: ProbeMechanism,
    pub rho: f64,
    pub miss_pct: f64,
    pub relative_efficiency: f64,
    pub re_se: f64,
    pub mean_adjusted_variance: f64,
    pub unadjusted_variance: f64,
    /// Average sample correlation of the pseudo covariate with the outcome.
    pub mean_correlation: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeGrid {
    pub cells: Vec<ProbeCell>,
}

impl ProbeGrid {
    pub fn cell(&self, rho: f64, miss: f64) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| (c.rho - rho).abs() < 1e-9 && (c.miss_pct - 100.0 * miss).abs() < 1e-6)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rho,miss_pct,relative_efficiency,re_se,mechanism,mean_correlation\n");
        for c in &self.cells {
            let m = match c.mechanism {
                ProbeMechanism::Mcar => "mcar",
                ProbeMechanism::Mnar => "mnar",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.rho, c.miss_pct, c.relative_efficiency, c.re_se, m, c.mean_correlation
            );
        }
        out
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Synthetic stand-in for a two-arm trial with 392 analyzed units.
pub fn probe_base_dataset(seed: u64) -> TrialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 392;
    let n1 = 195;
    let z: Vec<u8> = (0..n).map(|i| u8::from(i < n1)).collect();
    let y: Vec<Option<f64>> = z
        .iter()
        .map(|&zi| {
            let e: f64 = rng.sample(StandardNormal);
            Some(50.0 + 1.5 * zi as f64 + 8.8 * e)
        })
        .collect();
    TrialDataset::new(z, OutcomeKind::Continuous, y, vec![]).expect("probe base dataset")
}

fn variance_of(ds: &TrialDataset, spec: &MethodSpec, how: ProbeVariance, seed: u64) -> Result<f64> {
    match how {
        ProbeVariance::Robust => {
            let res = if spec.estimator == EstimatorKind::Unadjusted {
                unadjusted(ds)?
            } else {
                ancova_lin(&impute(ds, &spec.imputation)?, spec.include_msi)?
            };
            res.variance
                .get(&VarianceKind::HcRobust)
                .copied()
                .ok_or_else(|| Error::Numerical("robust variance unavailable".into()))
        }
        ProbeVariance::Bootstrap { replicates } => {
            Ok(bootstrap_variance(ds, spec, &BootstrapPlan::new(replicates, seed))?.variance)
        }
    }
}

/// Efficiency of mean-imputed ANCOVA with a missing indicator, relative to
/// the unadjusted estimator, for a pseudo covariate of correlation about
/// `rho` with the outcome and a given missing proportion. Every grid cell
/// of one repetition reuses the same normal and uniform draws.
pub fn efficiency_probe(base: &TrialDataset, cfg: &ProbeConfig) -> Result<ProbeGrid> {
    cfg.validate()?;
    if base.has_missing_outcomes() {
        return Err(Error::Data("probe base dataset must have complete outcomes".into()));
    }
    let n = base.n();
    let (m1, m0) = base.arm_means()?;
    let resid: Vec<f64> = (0..n)
        .map(|i| base.outcome()[i] - if base.treatment()[i] == 1 { m1 } else { m0 })
        .collect();
    let v_s = sample_variance(&resid);
    let base_plain = base.select_covariates(&[])?;
    let unadj_spec = MethodSpec::new(EstimatorKind::Unadjusted);
    let adj_spec = MethodSpec::new(EstimatorKind::Ancova)
        .imputation(ImputationSpec::mean())
        .msi(true);
    let v_unadj = variance_of(&base_plain, &unadj_spec, cfg.variance, cfg.seed)?;

    let cells: Vec<(f64, f64)> = cfg
        .rhos
        .iter()
        .flat_map(|&r| cfg.missing.iter().map(move |&m| (r, m)))
        .collect();
    let per_rep: Vec<Vec<Option<(f64, f64)>>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(cfg.seed, rep as u64);
            let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            cells
                .iter()
                .enumerate()
                .map(|(k, &(rho, miss))| {
                    probe_cell_draw(base, &resid, v_s, &eps, &u, rho, miss, cfg, &adj_spec, rep as u64 * 1000 + k as u64)
                        .ok()
                })
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(cells.len());
    for (k, &(rho, miss)) in cells.iter().enumerate() {
        let draws: Vec<(f64, f64)> = per_rep.iter().filter_map(|r| r[k]).collect();
        let failures = cfg.repetitions - draws.len();
        if draws.len() < 2 {
            return Err(Error::Numerical(format!("probe cell rho={rho}, miss={miss} failed")));
        }
        let vars: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let mean_v = vars.iter().sum::<f64>() / vars.len() as f64;
        let se_v = (sample_variance(&vars) / vars.len() as f64).sqrt();
        let re = v_unadj / mean_v;
        out.push(ProbeCell {
            mechanism: cfg.mechanism,
            rho,
            miss_pct: 100.0 * miss,
            relative_efficiency: re,
            re_se: re * se_v / mean_v,
            mean_adjusted_variance: mean_v,
            unadjusted_variance: v_unadj,
            mean_correlation: draws.iter().map(|d| d.1).sum::<f64>() / draws.len() as f64,
            failures,
        });
    }
    Ok(ProbeGrid { cells: out })
}

#[allow(clippy::too_many_arguments)]
fn probe_cell_draw(
    base: &TrialDataset,
    resid: &[f64],
    v_s: f64,
    eps: &[f64],
    u: &[f64],
    rho: f64,
    miss: f64,
    cfg: &ProbeConfig,
    spec: &MethodSpec,
    boot_seed: u64,
) -> Result<(f64, f64)> {
    let n = base.n();
    let scale = ((1.0 - rho * rho) * v_s).sqrt();
    let x: Vec<f64> = (0..n).map(|i| rho * resid[i] + scale * eps[i]).collect();
    let corr = correlation(&x, base.outcome());
    let observed: Vec<bool> = if miss == 0.0 {
        vec![true; n]
    } else {
        match cfg.mechanism {
            ProbeMechanism::Mcar => u.iter().map(|v| *v < 1.0 - miss).collect(),
            ProbeMechanism::Mnar => {
                let d0 = calibrate_intercept_on(&x, miss)?;
                (0..n).map(|i| u[i] < expit(d0 + x[i])).collect()
            }
        }
    };
    let values = (0..n).map(|i| observed[i].then_some(x[i])).collect();
    let cov = Covariate::new("x", CovariateKind::Continuous, values)?;
    let outcome = base.outcome().iter().map(|y| Some(*y)).collect();
    let ds = TrialDataset::new(base.treatment().to_vec(), OutcomeKind::Continuous, outcome, vec![cov])?;
    let v = variance_of(&ds, spec, cfg.variance, cfg.seed ^ boot_seed)?;
    Ok((v, corr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_table_is_complete() {
        let refs = reference_values();
        assert_eq!(refs.len(), 4 * 6 * 18 + 2 * 6 * 10);
        let cell = refs
            .iter()
            .find(|r| r.table == 1 && r.mechanism == "mnar" && r.missing_pct == 30 && r.method_label() == "Mean imputation w/ MSI (OW)")
            .unwrap();
        assert_eq!(cell.re, 3.45);
        // every published cell maps to a preset method
        for r in &refs {
            let p = build_preset(r.table, &r.mechanism, r.missing_pct).unwrap();
            assert!(p.methods.iter().any(|m| m.label == r.method_label()), "{}", r.method_label());
        }
    }

    #[test]
    fn mcar_calibration_is_the_rate() {
        assert_eq!(calibrate_intercept(&CovMechanism::Mcar, 0.3, 0.3).unwrap(), 0.7);
    }

    #[test]
    fn zero_slope_calibration_is_logit() {
        let m = CovMechanism::Mar { slopes: [0.0, 0.0] };
        let c = calibrate_intercept(&m, 0.3, 0.3).unwrap();
        assert!((c - crate::numerics::logit(0.7)).abs() < 1e-9);
    }

    #[test]
    fn scenario_json_round_trip() {
        let sc = Scenario::continuous(100).mechanism(CovMechanism::mar(), 0.1).outcome_missingness(OUTCOME_THETA);
        let text = serde_json::to_string(&sc).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&text).unwrap(), sc);
        let minimal = r#"{"n":50,"outcome_kind":"binary","alpha":0,"beta0":0,"beta1":[4,1,1],"beta2":[-3.5,0.3,0.3],
            "cov_missingness":{"type":"mnar"},"target_missing_rate":0.3}"#;
        let sc: Scenario = serde_json::from_str(minimal).unwrap();
        assert_eq!(sc.cov_missingness, CovMechanism::Mnar { slope: -1.0 });
        assert_eq!(sc.replications, 5000);
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("table9_x").unwrap_err().to_string();
        assert!(err.contains("table1_mcar30_n100"));
    }
}
