//! Exact rational linear algebra for oracle checks, plus small dataset
//! builders shared by the integration tests.
#![allow(dead_code)]

use covadj::data::{Covariate, CovariateKind, OutcomeKind, TrialDataset};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Q = BigRational;
pub type QMat = Vec<Vec<Q>>;

pub fn q(x: f64) -> Q {
    BigRational::from_float(x).expect("finite")
}

pub fn qi(x: i64) -> Q {
    BigRational::from_integer(BigInt::from(x))
}

pub fn f(x: &Q) -> f64 {
    x.to_f64().unwrap()
}

pub fn zeros(r: usize, c: usize) -> QMat {
    vec![vec![Q::zero(); c]; r]
}

pub fn from_rows(rows: &[Vec<f64>]) -> QMat {
    rows.iter().map(|r| r.iter().map(|v| q(*v)).collect()).collect()
}

pub fn transpose(a: &QMat) -> QMat {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j].clone()).collect()).collect()
}

pub fn matmul(a: &QMat, b: &QMat) -> QMat {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(r, c);
    for i in 0..r {
        for l in 0..k {
            if a[i][l].is_zero() {
                continue;
            }
            for j in 0..c {
                out[i][j] += &a[i][l] * &b[l][j];
            }
        }
    }
    out
}

/// Gauss-Jordan inverse; panics on a singular matrix.
pub fn inverse(a: &QMat) -> QMat {
    let n = a.len();
    let mut m: QMat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { Q::one() } else { Q::zero() }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).find(|&r| !m[r][col].is_zero()).expect("singular");
        m.swap(col, piv);
        let p = m[col][col].clone();
        for v in m[col].iter_mut() {
            *v = &*v / &p;
        }
        for r in 0..n {
            if r != col && !m[r][col].is_zero() {
                let factor = m[r][col].clone();
                for c in 0..2 * n {
                    let sub = &factor * &m[col][c];
                    m[r][c] -= sub;
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Weighted normal equations `(X'WX)^-1 X'Wy`.
pub fn normal_equations(x: &QMat, y: &[Q], w: Option<&[Q]>) -> Vec<Q> {
    let n = x.len();
    let k = x[0].len();
    let mut xtwx = zeros(k, k);
    let mut xtwy = vec![Q::zero(); k];
    for i in 0..n {
        let wi = w.map_or_else(Q::one, |w| w[i].clone());
        for a in 0..k {
            let wa = &wi * &x[i][a];
            xtwy[a] += &wa * &y[i];
            for b in 0..k {
                xtwx[a][b] += &wa * &x[i][b];
            }
        }
    }
    let inv = inverse(&xtwx);
    (0..k).map(|a| (0..k).map(|b| &inv[a][b] * &xtwy[b]).fold(Q::zero(), |s, v| s + v)).collect()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

pub fn qabs(x: &Q) -> Q {
    x.abs()
}

/// Two-arm continuous trial from plain vectors; `None` marks a missing cell.
pub fn trial(z: &[u8], y: &[f64], covs: &[(&str, Vec<Option<f64>>)]) -> TrialDataset {
    let covariates = covs
        .iter()
        .map(|(name, v)| Covariate::new(*name, CovariateKind::Continuous, v.clone()).unwrap())
        .collect();
    TrialDataset::new(z.to_vec(), OutcomeKind::Continuous, y.iter().map(|v| Some(*v)).collect(), covariates).unwrap()
}
