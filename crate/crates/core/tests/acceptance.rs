//! Acceptance suite. Every criterion writes one PASS/FAIL line to stderr
//! (bypassing output capture) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use common::trial;
use covadj::data::{Covariate, CovariateKind, OutcomeKind, TrialDataset};
use covadj::estimators::*;
use covadj::missing::{impute, ImputationSpec};
use covadj::simlab::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const SEED: u64 = 1;
const REPS: usize = 2000;

fn report_line(id: &str, pass: bool, detail: &str) {
    let line = format!("{} {id}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn finish(id: &str, checks: &[(String, bool)]) {
    let pass = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks
        .iter()
        .map(|(d, ok)| if *ok { d.clone() } else { format!("{d} <-- out of range") })
        .collect();
    report_line(id, pass, &detail.join("; "));
    assert!(pass, "{id} failed: {}", detail.join("; "));
}

fn within_rel(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn run_preset(name: &str) -> MonteCarloReport {
    let p = preset(name).unwrap();
    let sc = p.scenario.clone().replications(REPS).seed(SEED);
    run_monte_carlo(&sc, &p.methods, &p.reference).unwrap()
}

fn cached(name: &'static str) -> &'static MonteCarloReport {
    static CACHE: OnceLock<std::sync::Mutex<BTreeMap<&'static str, &'static MonteCarloReport>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(name) {
        return r;
    }
    let report: &'static MonteCarloReport = Box::leak(Box::new(run_preset(name)));
    *cache.lock().unwrap().entry(name).or_insert(report)
}

fn row<'a>(r: &'a MonteCarloReport, label: &str) -> &'a MethodSummary {
    r.row(label).unwrap_or_else(|| panic!("{} has no row '{label}'", r.scenario.name.as_deref().unwrap_or("?")))
}

#[test]
fn c1_table1_efficiency() {
    let mcar = cached("table1_mcar30_n100");
    let mnar = cached("table1_mnar30_n100");
    let full = row(mcar, "Full data (ANCOVA)").relative_efficiency;
    let cc = row(mcar, "Complete covariate (ANCOVA)").relative_efficiency;
    let mut checks = vec![
        (format!("full-data ANCOVA RE {full:.2} vs 11.22 +-15%"), within_rel(full, 11.22, 0.15)),
        (format!("complete-covariate RE {cc:.2} vs 1.20 +-10%"), within_rel(cc, 1.20, 0.10)),
    ];
    for (adj, without_pub, with_pub) in [("ANCOVA", 2.44, 3.42), ("OW", 2.45, 3.45)] {
        let without = row(mnar, &format!("Mean imputation w/o MSI ({adj})")).relative_efficiency;
        let with = row(mnar, &format!("Mean imputation w/ MSI ({adj})")).relative_efficiency;
        checks.push((format!("MNAR {adj} w/o MSI RE {without:.2} vs {without_pub} +-15%"), within_rel(without, without_pub, 0.15)));
        checks.push((format!("MNAR {adj} w/ MSI RE {with:.2} vs {with_pub} +-15%"), within_rel(with, with_pub, 0.15)));
        checks.push((format!("MNAR {adj} MSI gain {with:.2} > {without:.2}"), with > without));
    }
    finish("C1 table 1 efficiency", &checks);
}

#[test]
fn c2_bias_structure() {
    let mar = cached("table1_mar30_n100");
    let mcar = cached("table1_mcar30_n100");
    let mnar = cached("table1_mnar30_n100");
    let mut checks = Vec::new();
    for adj in ["ANCOVA", "OW"] {
        let b = row(mar, &format!("Complete unit ({adj})")).bias.abs();
        checks.push((format!("MAR complete-unit {adj} |bias| {b:.3} vs 0.20 +-0.03"), (b - 0.20).abs() <= 0.03));
        let b = row(mcar, &format!("Complete unit ({adj})")).bias.abs();
        checks.push((format!("MCAR complete-unit {adj} |bias| {b:.3} <= 0.02"), b <= 0.02));
    }
    let mut worst = (0.0f64, String::new());
    for r in [mcar, mar, mnar] {
        for m in r.rows.iter().filter(|m| m.label.contains("imputation")) {
            if m.bias.abs() > worst.0 {
                worst = (m.bias.abs(), format!("{} / {}", r.scenario.name.as_deref().unwrap_or("?"), m.label));
            }
        }
    }
    checks.push((format!("imputation max |bias| {:.3} ({}) <= 0.02", worst.0, worst.1), worst.0 <= 0.02));
    finish("C2 bias structure", &checks);
}

#[test]
fn c3_binary_outcomes() {
    let mcar = cached("table3_mcar30_n100");
    let mnar = cached("table3_mnar30_n100");
    let mut checks = Vec::new();
    for (adj, target) in [("ANCOVA", 1.53), ("OW", 1.52)] {
        let re = row(mcar, &format!("Full data ({adj})")).relative_efficiency;
        checks.push((format!("full-data {adj} RE {re:.3} vs {target} +-10%"), within_rel(re, target, 0.10)));
        let b = row(mnar, &format!("Complete unit ({adj})")).bias.abs();
        checks.push((format!("MNAR complete-unit {adj} |bias| {b:.3} vs 0.06 +-0.02"), (b - 0.06).abs() <= 0.02));
    }
    finish("C3 binary outcomes", &checks);
}

#[test]
fn c4_missing_outcome_pipeline() {
    let r = cached("table5_mcar30_n100");
    let cc = row(r, "Complete outcome w/o cov. adj.").bias.abs();
    let ipw = row(r, IPW_REFERENCE_LABEL).bias.abs();
    let full = row(r, "IPW & Full X").relative_efficiency;
    let mean = row(r, "IPW & Mean imputation w/ MSI").relative_efficiency;
    let rate = r.mean_outcome_missing_rate;
    let failures: usize = r.rows.iter().map(|m| m.failures).max().unwrap_or(0);
    let checks = vec![
        (format!("complete-outcome |bias| {cc:.3} vs 0.34 +-0.04"), (cc - 0.34).abs() <= 0.04),
        (format!("IPW w/o adjustment |bias| {ipw:.3} <= 0.04"), ipw <= 0.04),
        (format!("IPW & Full X RE {full:.2} vs 2.62 +-20%"), within_rel(full, 2.62, 0.20)),
        (format!("IPW & mean imputation w/ MSI RE {mean:.2} vs 1.77 +-20%"), within_rel(mean, 1.77, 0.20)),
        (format!("outcome missing rate {rate:.3} vs 0.25 +-0.02"), (rate - 0.25).abs() <= 0.02),
        (format!("{} of {REPS} replicates kept (max {failures} failures per method)", r.replications_completed), !r.rows.iter().any(|m| m.flagged)),
    ];
    finish("C4 missing outcome pipeline", &checks);
}

/// Random trial with `p` covariates, each independently missing at its own
/// rate, and optionally missing outcomes.
fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize, outcome_missing: bool) -> Option<TrialDataset> {
    let mut z: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
    z[0] = 1;
    z[1] = 0;
    let mut covs = Vec::new();
    let mut signal = vec![0.0; n];
    for j in 0..p {
        let rate = rng.random_range(0.0..0.5);
        let binary = rng.random::<f64>() < 0.3;
        let vals: Vec<f64> = (0..n)
            .map(|_| if binary { f64::from(u8::from(rng.random::<bool>())) } else { rng.sample::<f64, _>(StandardNormal) })
            .collect();
        for i in 0..n {
            signal[i] += vals[i] / (j + 1) as f64;
        }
        let cells: Vec<Option<f64>> = vals.iter().map(|v| (rng.random::<f64>() >= rate).then_some(*v)).collect();
        let kind = if binary { CovariateKind::Binary } else { CovariateKind::Continuous };
        covs.push(Covariate::new(format!("x{j}"), kind, cells).ok()?);
    }
    let y: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let v = z[i] as f64 + signal[i] + rng.sample::<f64, _>(StandardNormal);
            (!outcome_missing || i < 4 || rng.random::<f64>() < 0.8).then_some(v)
        })
        .collect();
    TrialDataset::new(z, OutcomeKind::Continuous, y, covs).ok()
}

#[test]
fn c5_exact_balance() {
    let results: Vec<Option<f64>> = (0..1000u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ (k << 8));
            let n = rng.random_range(20..=500);
            let p = rng.random_range(1..=5);
            let msi = rng.random::<bool>();
            let ds = random_dataset(&mut rng, n, p, false)?;
            let cd = impute(&ds, &ImputationSpec::mean()).ok()?;
            let ps = fit_treatment_ps(&cd, msi).ok()?;
            ps.fit.converged.then(|| check_exact_balance(&ps, &cd).max_roster_discrepancy)
        })
        .collect();
    let fits: Vec<f64> = results.iter().flatten().copied().collect();
    let worst = fits.iter().copied().fold(0.0, f64::max);
    let checks = vec![
        (format!("{} of 1000 datasets gave converged fits", fits.len()), fits.len() >= 900),
        (format!("max roster discrepancy {worst:.2e} < 1e-8"), worst < 1e-8),
    ];
    finish("C5 exact balance", &checks);
}

#[test]
fn c6_imputation_constant_invariance() {
    let constants = [0.0, 1.0, -7.0, 100.0];
    let kinds = [EstimatorKind::Ancova, EstimatorKind::Ow, EstimatorKind::OwIpw];
    let results: Vec<(usize, usize, f64)> = (0..200u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ (k << 16) ^ 0x5eed);
            let n = rng.random_range(60..=400);
            let p = rng.random_range(1..=4);
            let Some(ds) = random_dataset(&mut rng, n, p, true) else { return (0, 1, 0.0) };
            let (mut compared, mut skipped, mut worst) = (0, 0, 0.0f64);
            for kind in kinds {
                let taus: Vec<Option<f64>> = constants
                    .iter()
                    .map(|c| estimate_point(&ds, &MethodSpec::new(kind).imputation(ImputationSpec::constant(*c)).msi(true)).ok())
                    .collect();
                if taus.iter().all(Option::is_none) {
                    skipped += 1;
                    continue;
                }
                compared += 1;
                let base = taus[0];
                for t in &taus[1..] {
                    worst = worst.max(match (base, t) {
                        (Some(a), Some(b)) => (a - b).abs() / (1.0 + a.abs()),
                        _ => f64::INFINITY,
                    });
                }
            }
            (compared, skipped, worst)
        })
        .collect();
    let compared: usize = results.iter().map(|r| r.0).sum();
    let skipped: usize = results.iter().map(|r| r.1).sum();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let checks = vec![
        (format!("{compared} estimator/dataset pairs compared, {skipped} failed for every constant"), compared >= 570),
        (format!("max relative spread {worst:.2e} <= 1e-8"), worst <= 1e-8),
    ];
    finish("C6 imputation-constant invariance", &checks);
}

#[test]
fn c7_hand_oracles() {
    let ds = trial(&[1, 1, 0, 0], &[5.0, 3.0, 2.0, 4.0], &[]);
    let e = [0.5, 0.8, 0.2, 0.5];
    let ow = weighting_estimate(&ds, &e, WeightScheme::Ow, None).unwrap().tau_hat;
    let ipw = weighting_estimate(&ds, &e, WeightScheme::Ipw, None).unwrap().tau_hat;
    let half_ow = weighting_estimate(&ds, &[0.5; 4], WeightScheme::Ow, None).unwrap().tau_hat;
    let half_ipw = weighting_estimate(&ds, &[0.5; 4], WeightScheme::Ipw, None).unwrap().tau_hat;
    let unadj = unadjusted(&ds).unwrap().tau_hat;
    let mut checks = vec![
        (format!("unadjusted {unadj}"), unadj == 1.0),
        (format!("OW {ow}"), (ow - 1.0).abs() < 1e-12),
        (format!("IPW {ipw}"), (ipw - 1.0).abs() < 1e-12),
        (format!("constant 0.5 OW {half_ow} IPW {half_ipw}"), half_ow == 1.0 && half_ipw == 1.0),
    ];

    let (mut swap_worst, mut scale_worst, mut constant_worst) = (0.0f64, 0.0f64, 0.0f64);
    let mut unadjusted_exact = true;
    for k in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ (k << 20) ^ 0x7a);
        let n = rng.random_range(40..=200);
        let Some(ds) = random_dataset(&mut rng, n, 2, true) else { continue };
        let swapped = ds.swap_arms();
        let u = unadjusted(&ds).unwrap().tau_hat;
        unadjusted_exact &= unadjusted(&swapped).unwrap().tau_hat == -u;
        for kind in [EstimatorKind::Ancova, EstimatorKind::Ow, EstimatorKind::Ipw, EstimatorKind::OwIpw, EstimatorKind::Wls] {
            if let (Ok(a), Ok(b)) = (estimate_point(&ds, &MethodSpec::new(kind)), estimate_point(&swapped, &MethodSpec::new(kind))) {
                swap_worst = swap_worst.max((a + b).abs() / (1.0 + a.abs()));
            }
        }
        let ev: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
        let factor = rng.random_range(0.05..1.0);
        let kp: Vec<f64> = p.iter().map(|v| v * factor).collect();
        let c = vec![rng.random_range(0.05..0.95); n];
        for scheme in [WeightScheme::Ow, WeightScheme::Ipw] {
            let a = weighting_estimate(&ds, &ev, scheme, Some(&p)).unwrap().tau_hat;
            let b = weighting_estimate(&ds, &ev, scheme, Some(&kp)).unwrap().tau_hat;
            scale_worst = scale_worst.max((a - b).abs() / (1.0 + a.abs()));
            let flat = weighting_estimate(&ds, &c, scheme, None).unwrap().tau_hat;
            constant_worst = constant_worst.max((flat - u).abs() / (1.0 + u.abs()));
        }
    }
    checks.push((format!("label swap: unadjusted exact {unadjusted_exact}, fitted max {swap_worst:.1e} <= 1e-10"), unadjusted_exact && swap_worst <= 1e-10));
    checks.push((format!("weight rescaling max {scale_worst:.1e} <= 1e-12"), scale_worst <= 1e-12));
    checks.push((format!("constant propensity max {constant_worst:.1e} <= 1e-12"), constant_worst <= 1e-12));
    finish("C7 hand oracles", &checks);
}

#[test]
fn c8_ancova_ow_agreement() {
    let sc = Scenario::continuous(5000);
    let diffs: Vec<f64> = (0..500u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = covadj::inference::replicate_rng(SEED, k);
            let sim = generate(&sc, &mut rng).unwrap();
            let a = estimate_point(&sim.data, &MethodSpec::new(EstimatorKind::Ancova)).unwrap();
            let o = estimate_point(&sim.data, &MethodSpec::new(EstimatorKind::Ow)).unwrap();
            (a - o).abs()
        })
        .collect();
    let close = diffs.iter().filter(|d| **d < 0.01).count();
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    let checks = vec![(format!("{close} of 500 replicates with |ancova - ow| < 0.01 (max {worst:.4}); need >= 475"), close >= 475)];
    finish("C8 ANCOVA/OW agreement", &checks);
}

#[test]
fn c9_efficiency_probe() {
    let base = probe_base_dataset(SEED);
    let mut checks = Vec::new();
    for mechanism in [ProbeMechanism::Mcar, ProbeMechanism::Mnar] {
        let cfg = ProbeConfig { mechanism, seed: SEED, ..ProbeConfig::default() };
        let grid = efficiency_probe(&base, &cfg).unwrap();
        let below: Vec<String> = grid
            .cells
            .iter()
            .filter(|c| c.relative_efficiency < 1.0 - 2.0 * c.re_se)
            .map(|c| format!("rho {} miss {}%: {:.3}", c.rho, c.miss_pct, c.relative_efficiency))
            .collect();
        checks.push((format!("{mechanism:?} RE >= 1 within 2 SE ({} violations{})", below.len(), if below.is_empty() { String::new() } else { format!(": {}", below.join(", ")) }), below.is_empty()));
        let mut drops = Vec::new();
        for &miss in &cfg.missing {
            let row: Vec<&ProbeCell> = cfg.rhos.iter().map(|&r| grid.cell(r, miss).unwrap()).collect();
            for w in row.windows(2) {
                if w[1].relative_efficiency < w[0].relative_efficiency {
                    drops.push(format!("miss {}% rho {}->{}", w[0].miss_pct, w[0].rho, w[1].rho));
                }
            }
        }
        checks.push((format!("{mechanism:?} nondecreasing in rho ({} drops{})", drops.len(), if drops.is_empty() { String::new() } else { format!(": {}", drops.join(", ")) }), drops.is_empty()));
        if mechanism == ProbeMechanism::Mcar {
            let re = grid.cell(0.5, 0.0).unwrap().relative_efficiency;
            checks.push((format!("MCAR RE at rho 0.5, miss 0: {re:.3} >= 1.3"), re >= 1.3));
        }
    }
    finish("C9 efficiency probe", &checks);
}
