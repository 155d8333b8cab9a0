//! Dense least squares and logistic maximum likelihood.
//!
//! Least squares goes through a Householder QR with column pivoting so that
//! collinear indicator and interaction blocks are detected and dropped rather
//! than producing garbage coefficients. Logistic fits use Newton/IRLS on an
//! internally standardized copy of the design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose pivot falls below this fraction of the leading pivot are
/// treated as linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

const IRLS_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Intercept,
    Treatment,
    Covariate,
    Indicator,
    Interaction,
}

/// A dense regressor matrix with labelled columns.
///
/// Always carries exactly one intercept column and never contains NaN.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
    roles: Vec<ColumnRole>,
}

impl DesignMatrix {
    /// A design holding only the intercept column for `n` units.
    pub fn intercept_only(n: usize) -> Self {
        DesignMatrix {
            values: DMatrix::from_element(n, 1, 1.0),
            labels: vec!["(intercept)".to_string()],
            roles: vec![ColumnRole::Intercept],
        }
    }

    pub fn push(
        &mut self,
        label: impl Into<String>,
        role: ColumnRole,
        values: &[f64],
    ) -> Result<()> {
        let label = label.into();
        if role == ColumnRole::Intercept {
            return Err(Error::InvalidInput(
                "a design matrix carries exactly one intercept column".into(),
            ));
        }
        if values.len() != self.nrows() {
            return Err(Error::Dimension(format!(
                "column '{}' has {} rows, design has {}",
                label,
                values.len(),
                self.nrows()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput(format!(
                "column '{label}' contains NaN; resolve missingness first"
            )));
        }
        if self.labels.contains(&label) {
            return Err(Error::InvalidInput(format!("duplicate column label '{label}'")));
        }
        let k = self.ncols();
        self.values = std::mem::replace(&mut self.values, DMatrix::zeros(0, 0)).insert_column(k, 0.0);
        self.values.column_mut(k).copy_from_slice(values);
        self.labels.push(label);
        self.roles.push(role);
        Ok(())
    }

    pub fn with(mut self, label: impl Into<String>, role: ColumnRole, values: &[f64]) -> Result<Self> {
        self.push(label, role, values)?;
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.nrows();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn intercept_index(&self) -> usize {
        self.roles
            .iter()
            .position(|r| *r == ColumnRole::Intercept)
            .expect("design invariant: one intercept column")
    }

    /// The same columns restricted to the given rows (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            values: self.values.select_rows(rows),
            labels: self.labels.clone(),
            roles: self.roles.clone(),
        }
    }
}

impl ColumnRole {
    /// Pivoting preference: when columns are dependent, higher tiers are the
    /// ones dropped, so an interaction goes before its main effect.
    fn tier(self) -> u8 {
        match self {
            ColumnRole::Intercept | ColumnRole::Treatment => 0,
            ColumnRole::Covariate | ColumnRole::Indicator => 1,
            ColumnRole::Interaction => 2,
        }
    }
}

/// Householder QR with column pivoting, stopped at the numerical rank.
///
/// The pivot is the largest remaining column among those in the lowest
/// `tiers` value that are still above the rank tolerance.
#[derive(Debug, Clone)]
pub(crate) struct PivotedQr {
    factors: DMatrix<f64>,
    tau: Vec<f64>,
    pub(crate) perm: Vec<usize>,
    pub(crate) rank: usize,
}

pub(crate) fn pivoted_qr(mut a: DMatrix<f64>, tiers: &[u8], rel_tol: f64) -> PivotedQr {
    let (m, k) = a.shape();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut tau = Vec::with_capacity(k.min(m));
    let lead = (0..k).map(|c| a.column(c).norm()).fold(0.0, f64::max);
    let mut rank = 0;
    for j in 0..m.min(k) {
        let mut best: Option<(usize, u8, f64)> = None;
        for c in j..k {
            let sq: f64 = (j..m).map(|i| a[(i, c)] * a[(i, c)]).sum();
            if sq == 0.0 || sq.sqrt() <= rel_tol * lead {
                continue;
            }
            let t = tiers[perm[c]];
            if best.is_none_or(|(_, bt, bsq)| t < bt || (t == bt && sq > bsq)) {
                best = Some((c, t, sq));
            }
        }
        let Some((best, _, best_sq)) = best else { break };
        if best != j {
            a.swap_columns(j, best);
            perm.swap(j, best);
        }
        let norm = best_sq.sqrt();
        let x0 = a[(j, j)];
        let beta = if x0 >= 0.0 { -norm } else { norm };
        let t = (beta - x0) / beta;
        let scale = 1.0 / (x0 - beta);
        for i in j + 1..m {
            a[(i, j)] *= scale;
        }
        a[(j, j)] = beta;
        for c in j + 1..k {
            let mut s = a[(j, c)];
            for i in j + 1..m {
                s += a[(i, j)] * a[(i, c)];
            }
            s *= t;
            a[(j, c)] -= s;
            for i in j + 1..m {
                a[(i, c)] -= s * a[(i, j)];
            }
        }
        tau.push(t);
        rank += 1;
    }
    PivotedQr {
        factors: a,
        tau,
        perm,
        rank,
    }
}

impl PivotedQr {
    fn apply_qt(&self, b: &mut [f64]) {
        let m = self.factors.nrows();
        for (j, &t) in self.tau.iter().enumerate() {
            let mut s = b[j];
            for i in j + 1..m {
                s += self.factors[(i, j)] * b[i];
            }
            s *= t;
            b[j] -= s;
            for i in j + 1..m {
                b[i] -= s * self.factors[(i, j)];
            }
        }
    }

    /// Solves the leading triangular block against Q^T b, returning the
    /// coefficients of the retained columns in pivot order.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut qtb = b.to_vec();
        self.apply_qt(&mut qtb);
        let r = self.rank;
        let mut x = vec![0.0; r];
        for i in (0..r).rev() {
            let mut s = qtb[i];
            for c in i + 1..r {
                s -= self.factors[(i, c)] * x[c];
            }
            x[i] = s / self.factors[(i, i)];
        }
        x
    }

    fn retained_sorted(&self) -> Vec<usize> {
        let mut kept = self.perm[..self.rank].to_vec();
        kept.sort_unstable();
        kept
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearFit {
    pub labels: Vec<String>,
    /// One entry per design column; `None` for columns dropped as dependent.
    pub coefficients: Vec<Option<f64>>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub dropped_columns: Vec<String>,
    /// Indices of retained columns, ascending.
    pub retained: Vec<usize>,
    pub weights_used: Option<Vec<f64>>,
}

impl LinearFit {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .and_then(|j| self.coefficients[j])
    }

    pub fn rank(&self) -> usize {
        self.retained.len()
    }
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Dimension(format!(
                "{} weights for {} rows",
                w.len(),
                n
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if !w.iter().any(|v| *v > 0.0) {
            return Err(Error::InvalidInput("all weights are zero".into()));
        }
    }
    Ok(())
}

/// Minimizes the (weighted) residual sum of squares.
///
/// Columns found dependent by the pivoted decomposition are dropped and
/// reported; their coefficients are `None`.
pub fn solve_least_squares(
    design: &DesignMatrix,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Result<LinearFit> {
    let n = design.nrows();
    let k = design.ncols();
    if response.len() != n {
        return Err(Error::Dimension(format!(
            "response has {} entries, design has {} rows",
            response.len(),
            n
        )));
    }
    if response.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("response contains non-finite values".into()));
    }
    check_weights(weights, n)?;

    let mut a = design.values.clone();
    let mut b = response.to_vec();
    if let Some(w) = weights {
        for i in 0..n {
            let sw = w[i].sqrt();
            for j in 0..k {
                a[(i, j)] *= sw;
            }
            b[i] *= sw;
        }
    }
    let tiers: Vec<u8> = design.roles.iter().map(|r| r.tier()).collect();
    let qr = pivoted_qr(a, &tiers, RANK_TOLERANCE);
    if qr.rank == 0 {
        return Err(Error::InvalidInput(
            "design has no estimable column for the supplied rows".into(),
        ));
    }
    let sol = qr.solve(&b);
    let mut coefficients = vec![None; k];
    for (pos, &col) in qr.perm[..qr.rank].iter().enumerate() {
        coefficients[col] = Some(sol[pos]);
    }
    let beta: Vec<f64> = coefficients.iter().map(|c| c.unwrap_or(0.0)).collect();
    let fitted: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|j| design.values[(i, j)] * beta[j]).sum())
        .collect();
    let residuals = response.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let retained = qr.retained_sorted();
    let dropped_columns = (0..k)
        .filter(|j| coefficients[*j].is_none())
        .map(|j| design.labels[j].clone())
        .collect();
    Ok(LinearFit {
        labels: design.labels.clone(),
        coefficients,
        fitted,
        residuals,
        dropped_columns,
        retained,
        weights_used: weights.map(|w| w.to_vec()),
    })
}

/// Covariance matrix over the retained columns of a fit.
#[derive(Debug, Clone)]
pub struct RobustCovariance {
    pub labels: Vec<String>,
    pub matrix: DMatrix<f64>,
    pub flavor: &'static str,
}

impl RobustCovariance {
    pub fn variance_of(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|j| self.matrix[(j, j)])
    }
}

/// HC0 sandwich `(X'WX)^-1 X' W diag(e^2) W X (X'WX)^-1` over retained columns.
pub fn hc_robust_covariance(fit: &LinearFit, design: &DesignMatrix) -> Result<RobustCovariance> {
    let n = design.nrows();
    if fit.residuals.len() != n || fit.labels.len() != design.ncols() {
        return Err(Error::Dimension("fit does not belong to this design".into()));
    }
    let x = design.values.select_columns(&fit.retained);
    let r = x.ncols();
    let ones = vec![1.0; n];
    let w = fit.weights_used.as_deref().unwrap_or(&ones);

    let mut cross = DMatrix::<f64>::zeros(r, r);
    let mut meat = DMatrix::<f64>::zeros(r, r);
    for i in 0..n {
        let row = x.row(i);
        let we = w[i] * fit.residuals[i];
        for a in 0..r {
            for b in 0..=a {
                cross[(a, b)] += w[i] * row[a] * row[b];
                meat[(a, b)] += we * we * row[a] * row[b];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            cross[(b, a)] = cross[(a, b)];
            meat[(b, a)] = meat[(a, b)];
        }
    }
    let bread = cross
        .cholesky()
        .ok_or_else(|| Error::Singular("cross-product of retained columns".into()))?
        .inverse();
    let mut cov = &bread * meat * &bread;
    for a in 0..r {
        for b in 0..a {
            let s = 0.5 * (cov[(a, b)] + cov[(b, a)]);
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    Ok(RobustCovariance {
        labels: fit.retained.iter().map(|&j| design.labels[j].clone()).collect(),
        matrix: cov,
        flavor: "HC0",
    })
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + e^eta) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    pub tol_score: f64,
    pub tol_loglik: f64,
    pub max_iter: usize,
    /// Largest absolute linear predictor accepted before the data are
    /// declared separated. Depends only on the column space, so it is
    /// unaffected by how indicator or fill columns are parameterized.
    pub separation_bound: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            tol_score: 1e-8,
            tol_loglik: 1e-10,
            max_iter: 100,
            separation_bound: 30.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogisticFit {
    pub labels: Vec<String>,
    pub coefficients: Vec<Option<f64>>,
    pub fitted_probabilities: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute score component over retained columns, original scale.
    pub max_abs_score: f64,
    pub log_likelihood: f64,
    pub dropped_columns: Vec<String>,
    pub retained: Vec<usize>,
}

impl LogisticFit {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .and_then(|j| self.coefficients[j])
    }
}

pub fn fit_logistic_irls(
    design: &DesignMatrix,
    labels: &[f64],
    weights: Option<&[f64]>,
) -> Result<LogisticFit> {
    fit_logistic_irls_with(design, labels, weights, &LogisticOptions::default())
}

fn solve_spd(info: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = info.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let mut ridged = info.clone();
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += IRLS_RIDGE;
    }
    ridged.cholesky().map(|ch| ch.solve(rhs))
}

/// Bernoulli maximum likelihood by Newton/IRLS.
///
/// Convergence requires the largest score component on the original design
/// scale to fall below `tol_score`. A stalled log-likelihood stops the
/// iteration early; the fit is then flagged converged only if the score test
/// also passes.
pub fn fit_logistic_irls_with(
    design: &DesignMatrix,
    labels: &[f64],
    weights: Option<&[f64]>,
    opts: &LogisticOptions,
) -> Result<LogisticFit> {
    let n = design.nrows();
    let k = design.ncols();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if labels.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(Error::InvalidInput("logistic labels must be 0 or 1".into()));
    }
    check_weights(weights, n)?;
    let ones = vec![1.0; n];
    let w = weights.unwrap_or(&ones);
    let wsum: f64 = w.iter().sum();
    let pos: f64 = w.iter().zip(labels).map(|(w, y)| w * y).sum();
    if pos <= 0.0 || pos >= wsum {
        return Err(Error::Separation("all labels take the same value".into()));
    }

    // Weighted standardization keeps the centered columns orthogonal to the
    // intercept under the fitting weights.
    let icpt = design.intercept_index();
    let mut center = vec![0.0; k];
    let mut scale = vec![1.0; k];
    let mut std = design.values.clone();
    for j in 0..k {
        if j == icpt {
            continue;
        }
        let col = design.column(j);
        let m = col.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / wsum;
        let v = col
            .iter()
            .zip(w)
            .map(|(x, w)| w * (x - m) * (x - m))
            .sum::<f64>()
            / wsum;
        let s = if v > 0.0 { v.sqrt() } else { 1.0 };
        center[j] = m;
        scale[j] = s;
        for i in 0..n {
            std[(i, j)] = (design.values[(i, j)] - m) / s;
        }
    }

    let mut weighted = std.clone();
    for i in 0..n {
        let sw = w[i].sqrt();
        for j in 0..k {
            weighted[(i, j)] *= sw;
        }
    }
    let tiers: Vec<u8> = design.roles.iter().map(|r| r.tier()).collect();
    let retained = pivoted_qr(weighted, &tiers, RANK_TOLERANCE).retained_sorted();
    let s_r = std.select_columns(&retained);
    let x_r = design.values.select_columns(&retained);
    let r = retained.len();

    let y = DVector::from_column_slice(labels);
    let wv = DVector::from_column_slice(w);
    let eval = |beta: &DVector<f64>| -> (DVector<f64>, DVector<f64>, f64) {
        let eta = &s_r * beta;
        let p = eta.map(expit);
        let ll = (0..n)
            .map(|i| w[i] * (labels[i] * eta[i] - softplus(eta[i])))
            .sum();
        (eta, p, ll)
    };
    let orig_score = |p: &DVector<f64>| -> f64 {
        let resid = (&y - p).component_mul(&wv);
        (x_r.transpose() * resid).amax()
    };

    let mut beta = DVector::<f64>::zeros(r);
    let (_, mut p, mut ll) = eval(&beta);
    let mut score = orig_score(&p);
    let mut iterations = 0;
    let mut stalled = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        if score <= opts.tol_score {
            converged = true;
            break;
        }
        let resid = (&y - &p).component_mul(&wv);
        let grad = s_r.transpose() * resid;
        let mut info = DMatrix::<f64>::zeros(r, r);
        for i in 0..n {
            let v = w[i] * p[i] * (1.0 - p[i]);
            let row = s_r.row(i);
            for a in 0..r {
                let va = v * row[a];
                for b in 0..=a {
                    info[(a, b)] += va * row[b];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let step = solve_spd(&info, &grad).ok_or_else(|| {
            Error::Singular("logistic information matrix".into())
        })?;

        let mut t = 1.0;
        let (mut cand, mut cand_p, mut cand_ll);
        loop {
            cand = &beta + &step * t;
            let (_, pp, l) = eval(&cand);
            cand_p = pp;
            cand_ll = l;
            if cand_ll >= ll - 1e-12 * ll.abs() || t < 1e-6 {
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        let change = (cand_ll - ll).abs() / (ll.abs() + opts.tol_loglik);
        beta = cand;
        p = cand_p;
        ll = cand_ll;
        score = orig_score(&p);

        if score <= opts.tol_score {
            // one more Newton step is nearly free and pushes the score
            // equations to roundoff
            if let Some(polished) = polish(&s_r, &beta, &p, &y, &wv, w) {
                let (_, pp, l) = eval(&polished);
                let s2 = orig_score(&pp);
                if s2 < score {
                    beta = polished;
                    p = pp;
                    ll = l;
                    score = s2;
                }
            }
            converged = true;
            break;
        }
        if change < opts.tol_loglik {
            stalled += 1;
            if stalled >= 3 {
                break;
            }
        } else {
            stalled = 0;
        }
    }
    if !converged {
        converged = score <= opts.tol_score;
    }
    if !converged {
        log::warn!(
            "logistic fit did not converge after {iterations} iterations (max |score| = {score:.3e})"
        );
    }
    let eta_max = (&s_r * &beta).amax();
    if eta_max > opts.separation_bound {
        return Err(Error::Separation(format!(
            "linear predictor magnitude {eta_max:.1} exceeds {}",
            opts.separation_bound
        )));
    }
    if p.iter().any(|v| *v <= 0.0 || *v >= 1.0) {
        return Err(Error::Separation(
            "fitted probabilities reached 0 or 1".into(),
        ));
    }

    let mut coefficients = vec![None; k];
    let mut shift = 0.0;
    for (pos, &j) in retained.iter().enumerate() {
        if j != icpt {
            coefficients[j] = Some(beta[pos] / scale[j]);
            shift += beta[pos] * center[j] / scale[j];
        }
    }
    if let Some(pos) = retained.iter().position(|&j| j == icpt) {
        coefficients[icpt] = Some(beta[pos] - shift);
    }
    let dropped_columns = (0..k)
        .filter(|j| !retained.contains(j))
        .map(|j| design.labels[j].clone())
        .collect();
    Ok(LogisticFit {
        labels: design.labels.clone(),
        coefficients,
        fitted_probabilities: p.iter().copied().collect(),
        converged,
        iterations,
        max_abs_score: score,
        log_likelihood: ll,
        dropped_columns,
        retained,
    })
}

fn polish(
    s_r: &DMatrix<f64>,
    beta: &DVector<f64>,
    p: &DVector<f64>,
    y: &DVector<f64>,
    wv: &DVector<f64>,
    w: &[f64],
) -> Option<DVector<f64>> {
    let r = beta.len();
    let grad = s_r.transpose() * (y - p).component_mul(wv);
    let mut info = DMatrix::<f64>::zeros(r, r);
    for i in 0..s_r.nrows() {
        let v = w[i] * p[i] * (1.0 - p[i]);
        let row = s_r.row(i);
        for a in 0..r {
            for b in 0..r {
                info[(a, b)] += v * row[a] * row[b];
            }
        }
    }
    solve_spd(&info, &grad).map(|step| beta + step)
}
