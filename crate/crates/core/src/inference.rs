//! Variance estimation: nonparametric bootstrap of a whole pipeline and the
//! stacked estimating-equation sandwich for weighting estimators.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_point, EstimateResult, MethodSpec, OutcomeMissingnessFit, PropensityFit, VarianceKind,
    WeightScheme,
};

/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

const Z_975: f64 = 1.959_963_984_540_054;

/// Independent stream for replicate `index` under `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    #[default]
    Percentile,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub seed: u64,
    /// Resample each arm separately, keeping arm sizes fixed.
    #[serde(default = "default_stratify")]
    pub stratify_by_arm: bool,
}

fn default_stratify() -> bool {
    true
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        BootstrapPlan {
            replicates: 1000,
            seed: 0,
            stratify_by_arm: true,
        }
    }
}

impl BootstrapPlan {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapPlan {
            replicates,
            seed,
            stratify_by_arm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub variance: f64,
    pub percentile_ci: (f64, f64),
    pub normal_ci: (f64, f64),
    pub tau_hat: f64,
    pub failures: usize,
    pub replicates_used: usize,
}

impl BootstrapResult {
    /// Records the variance and both intervals on an estimate.
    pub fn attach(&self, res: &mut EstimateResult) {
        res.variance.insert(VarianceKind::Bootstrap, self.variance);
        res.intervals.insert("percentile".into(), self.percentile_ci);
        res.intervals.insert("normal".into(), self.normal_ci);
        res.bootstrap_failures = Some(self.failures);
    }
}

fn resample_rows(ds: &TrialDataset, stratify: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = ds.n();
    if stratify {
        let mut rows = Vec::with_capacity(n);
        for arm in [1u8, 0] {
            let idx: Vec<usize> = (0..n).filter(|&i| ds.treatment()[i] == arm).collect();
            rows.extend((0..idx.len()).map(|_| *idx.choose(rng).unwrap()));
        }
        rows
    } else {
        let all: Vec<usize> = (0..n).collect();
        (0..n).map(|_| *all.choose(rng).unwrap()).collect()
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

/// Reruns the full method on resampled units (missingness carried along).
/// Replicates that fail are dropped and counted.
pub fn bootstrap_variance(ds: &TrialDataset, spec: &MethodSpec, plan: &BootstrapPlan) -> Result<BootstrapResult> {
    if plan.replicates < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let tau_hat = estimate_point(ds, spec)?;
    let draws: Vec<Option<f64>> = (0..plan.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(plan.seed, b as u64);
            let rows = resample_rows(ds, plan.stratify_by_arm, &mut rng);
            ds.select_rows(&rows)
                .and_then(|boot| estimate_point(&boot, spec))
                .ok()
                .filter(|t| t.is_finite())
        })
        .collect();
    let mut taus: Vec<f64> = draws.iter().flatten().copied().collect();
    let failures = plan.replicates - taus.len();
    if failures as f64 > MAX_FAILURE_SHARE * plan.replicates as f64 || taus.len() < 2 {
        return Err(Error::Numerical(format!(
            "{failures} of {} bootstrap replicates failed",
            plan.replicates
        )));
    }
    if failures > 0 {
        log::warn!("{failures} bootstrap replicates failed and were dropped");
    }
    let variance = sample_variance(&taus);
    taus.sort_by(|a, b| a.total_cmp(b));
    let sd = variance.sqrt();
    Ok(BootstrapResult {
        variance,
        percentile_ci: (quantile(&taus, 0.025), quantile(&taus, 0.975)),
        normal_ci: (tau_hat - Z_975 * sd, tau_hat + Z_975 * sd),
        tau_hat,
        failures,
        replicates_used: taus.len(),
    })
}

/// Whether the treatment propensity parameters count as estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityTreatment {
    Estimated,
    Known,
}

/// Sandwich variance of the weighted difference `mu1 - mu0`.
///
/// Stacks, per unit, the outcome-missingness score (when `om` is given),
/// the treatment propensity score (unless treated as known) and the two
/// weighted-mean equations, then evaluates `J^-1 B J^-T`.
pub fn sandwich_variance(
    ds: &TrialDataset,
    ps: &PropensityFit,
    scheme: WeightScheme,
    om: Option<&OutcomeMissingnessFit>,
    propensity: PropensityTreatment,
) -> Result<f64> {
    let n = ds.n();
    let e = ps.scores();
    let x = ps.retained_design();
    let k = if propensity == PropensityTreatment::Estimated { x.ncols() } else { 0 };
    let d = om.map(|m| m.retained_design());
    let m = d.as_ref().map_or(0, |d| d.ncols());
    let dim = m + k + 2;
    let (i1, i0) = (m + k, m + k + 1);
    let z = ds.treatment();
    let r = ds.outcome_observed();
    let y = ds.outcome();

    let p_of = |i: usize| om.map_or(1.0, |o| o.p_hat[i]);
    let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        if !r[i] {
            continue;
        }
        if z[i] == 1 {
            let w = scheme.treated_weight(e[i]) / p_of(i);
            s1 += w * y[i];
            w1 += w;
        } else {
            let w = scheme.control_weight(e[i]) / p_of(i);
            s0 += w * y[i];
            w0 += w;
        }
    }
    if w1 <= 0.0 || w0 <= 0.0 {
        return Err(Error::EmptyArm("zero total weight".into()));
    }
    let (mu1, mu0) = (s1 / w1, s0 / w0);

    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    let mut meat = DMatrix::<f64>::zeros(dim, dim);
    let mut psi = DVector::<f64>::zeros(dim);
    for i in 0..n {
        psi.fill(0.0);
        let ei = e[i];
        let p = p_of(i);
        let ri = if r[i] { 1.0 } else { 0.0 };
        let yi = if r[i] { y[i] } else { 0.0 };
        let zi = z[i] as f64;
        let a1 = ri * zi * scheme.treated_weight(ei) / p;
        let a0 = ri * (1.0 - zi) * scheme.control_weight(ei) / p;
        let res1 = yi - mu1;
        let res0 = yi - mu0;
        if let (Some(o), Some(d)) = (om, d.as_ref()) {
            let p_raw = o.fit.fitted_probabilities[i];
            let floored = o.n_floored > 0 && p_raw < o.p_hat[i];
            for a in 0..m {
                psi[a] = d[(i, a)] * (ri - p_raw);
                for b in 0..m {
                    jac[(a, b)] -= p_raw * (1.0 - p_raw) * d[(i, a)] * d[(i, b)];
                }
                if !floored {
                    jac[(i1, a)] -= a1 * (1.0 - p) * res1 * d[(i, a)];
                    jac[(i0, a)] -= a0 * (1.0 - p) * res0 * d[(i, a)];
                }
            }
        }
        if k > 0 {
            let v = ei * (1.0 - ei);
            let g1 = ri * zi / p * scheme.treated_weight_derivative(ei) * v * res1;
            let g0 = ri * (1.0 - zi) / p * scheme.control_weight_derivative(ei) * v * res0;
            for a in 0..k {
                psi[m + a] = x[(i, a)] * (zi - ei);
                for b in 0..k {
                    jac[(m + a, m + b)] -= v * x[(i, a)] * x[(i, b)];
                }
                jac[(i1, m + a)] += g1 * x[(i, a)];
                jac[(i0, m + a)] += g0 * x[(i, a)];
            }
        }
        psi[i1] = a1 * res1;
        psi[i0] = a0 * res0;
        jac[(i1, i1)] -= a1;
        jac[(i0, i0)] -= a0;
        meat.ger(1.0, &psi, &psi, 1.0);
    }
    let inv = jac
        .try_inverse()
        .ok_or_else(|| Error::Singular("sandwich bread matrix".into()))?;
    let cov = &inv * meat * inv.transpose();
    let var = cov[(i1, i1)] + cov[(i0, i0)] - 2.0 * cov[(i1, i0)];
    if !var.is_finite() {
        return Err(Error::Numerical("non-finite sandwich variance".into()));
    }
    Ok(var.max(0.0))
}
