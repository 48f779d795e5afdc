//! Covariance of the U statistics and of the variance-component estimates.
//!
//! `Var(U_e)` and the three covariances are exact. `Var(U_a)` and `Var(U_b)`
//! contain a sum over squared co-observation counts that has no linear-time
//! form, so they are replaced by upper bounds; every other term, including the
//! `(κ+2)` co-observation term, is evaluated exactly from per-column
//! (per-row) sums gathered in the second pass.

use crate::error::{Error, Result};
use crate::model::{Kurtoses, VarianceComponents};
use crate::moments::MomentMatrix;
use crate::pass::{ObservationCounts, PatternSums};

/// Shorthand for `σ⁴ (κ + 2)` with the kurtosis floored at -2.
#[inline]
fn fourth(s2: f64, kappa: f64) -> f64 {
    s2 * s2 * (kappa + 2.0).max(0.0)
}

/// Upper bound on `Var(U_a)`.
pub fn var_ua_upper(theta: &VarianceComponents, kappa: &Kurtoses, p: &PatternSums) -> f64 {
    let (b, e) = (theta.sigma2_b, theta.sigma2_e);
    let (n, r) = (p.n(), p.r());
    let inv = p.counts.sum_ni_inv;
    fourth(b, kappa.kappa_b) * p.row_pair_weight
        + 2.0 * b * b * (p.zn.mp - p.row_pair_inv).max(0.0)
        + 4.0 * b * e * (n - r)
        + fourth(e, kappa.kappa_e) * (n - 2.0 * r + inv)
        + 2.0 * e * e * (r - inv)
}

/// Upper bound on `Var(U_b)`.
pub fn var_ub_upper(theta: &VarianceComponents, kappa: &Kurtoses, p: &PatternSums) -> f64 {
    let (a, e) = (theta.sigma2_a, theta.sigma2_e);
    let (n, c) = (p.n(), p.c());
    let inv = p.counts.sum_nj_inv;
    fourth(a, kappa.kappa_a) * p.col_pair_weight
        + 2.0 * a * a * (p.zn.pm - p.col_pair_inv).max(0.0)
        + 4.0 * a * e * (n - c)
        + fourth(e, kappa.kappa_e) * (n - 2.0 * c + inv)
        + 2.0 * e * e * (c - inv)
}

/// `N³ - 2N Σ Z_ij N_i N_j + ΣN_i² ΣN_j²`, the coefficient of `4σ²_Aσ²_B` in `Var(U_e)`.
pub fn chi_square_coefficient(p: &PatternSums) -> Result<f64> {
    let c = &p.counts;
    let n = c.n as u128;
    let over = || Error::Overflow("chi-square coefficient");
    let n3 = n.checked_mul(n).and_then(|x| x.checked_mul(n)).ok_or_else(over)?;
    let prod = c.sum_ni2.checked_mul(c.sum_nj2).ok_or_else(over)?;
    let mid = p.zn.pp.checked_mul(2 * n).ok_or_else(over)?;
    let total = n3.checked_add(prod).ok_or_else(over)?;
    Ok(total.checked_sub(mid).ok_or_else(over)? as f64)
}

/// `Σ_i N_i² (N - N_i)²` from exact power sums.
fn spread(n: u128, s2: u128, s3: u128, s4: u128) -> Result<f64> {
    let over = || Error::Overflow("count power sums");
    let a = n.checked_mul(n).and_then(|x| x.checked_mul(s2)).ok_or_else(over)?;
    let b = n.checked_mul(2).and_then(|x| x.checked_mul(s3)).ok_or_else(over)?;
    Ok(a.checked_add(s4).and_then(|x| x.checked_sub(b)).ok_or_else(over)? as f64)
}

/// Exact `Var(U_e)`.
pub fn var_ue_exact(theta: &VarianceComponents, kappa: &Kurtoses, p: &PatternSums) -> Result<f64> {
    let c = &p.counts;
    let [a, b, e] = theta.as_array();
    let n = p.n();
    let nu = c.n as u128;
    let over = || Error::Overflow("count power sums");
    let sq_a = c.sum_ni2.checked_mul(c.sum_ni2).ok_or_else(over)? - c.sum_ni4;
    let sq_b = c.sum_nj2.checked_mul(c.sum_nj2).ok_or_else(over)? - c.sum_nj4;
    let n3 = n * n * n;
    Ok(2.0 * a * a * sq_a as f64
        + fourth(a, kappa.kappa_a) * spread(nu, c.sum_ni2, c.sum_ni3, c.sum_ni4)?
        + 2.0 * b * b * sq_b as f64
        + fourth(b, kappa.kappa_b) * spread(nu, c.sum_nj2, c.sum_nj3, c.sum_nj4)?
        + 2.0 * e * e * n * (n - 1.0)
        + fourth(e, kappa.kappa_e) * n * (n - 1.0) * (n - 1.0)
        + 4.0 * a * b * chi_square_coefficient(p)?
        + 4.0 * a * e * (n3 - n * c.sum_ni2 as f64)
        + 4.0 * b * e * (n3 - n * c.sum_nj2 as f64))
}

pub fn cov_ua_ub(theta: &VarianceComponents, kappa: &Kurtoses, p: &PatternSums) -> f64 {
    fourth(theta.sigma2_e, kappa.kappa_e) * p.both_weight
}

pub fn cov_ua_ue(theta: &VarianceComponents, kappa: &Kurtoses, p: &PatternSums) -> f64 {
    let (b, e) = (theta.sigma2_b, theta.sigma2_e);
    let (n, r) = (p.n(), p.r());
    2.0 * b * b * (p.sum_trow2_over_ni - p.zn.m2)
        + fourth(b, kappa.kappa_b) * p.row_cross_weight
        + 2.0 * e * e * (n - r)
        + fourth(e, kappa.kappa_e) * (n - r) * (n - 1.0)
        + 4.0 * b * e * n * (n - r)
}

pub fn cov_ub_ue(theta: &VarianceComponents, kappa: &Kurtoses, p: &PatternSums) -> f64 {
    let (a, e) = (theta.sigma2_a, theta.sigma2_e);
    let (n, c) = (p.n(), p.c());
    2.0 * a * a * (p.sum_tcol2_over_nj - p.zn.two_m)
        + fourth(a, kappa.kappa_a) * p.col_cross_weight
        + 2.0 * e * e * (n - c)
        + fourth(e, kappa.kappa_e) * (n - c) * (n - 1.0)
        + 4.0 * a * e * n * (n - c)
}

/// Covariance matrix of `(U_a, U_b, U_e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UCovariance {
    pub matrix: [[f64; 3]; 3],
    /// `false` marks entries that are upper bounds rather than exact values.
    pub exact: [[bool; 3]; 3],
}

pub fn cov_uu(theta: &VarianceComponents, kappa: &Kurtoses, p: &PatternSums) -> Result<UCovariance> {
    let ab = cov_ua_ub(theta, kappa, p);
    let ae = cov_ua_ue(theta, kappa, p);
    let be = cov_ub_ue(theta, kappa, p);
    let matrix = [
        [var_ua_upper(theta, kappa, p), ab, ae],
        [ab, var_ub_upper(theta, kappa, p), be],
        [ae, be, var_ue_exact(theta, kappa, p)?],
    ];
    let mut exact = [[true; 3]; 3];
    exact[0][0] = false;
    exact[1][1] = false;
    Ok(UCovariance { matrix, exact })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Diagonal large-sample formula, valid when the balance ratio is small.
    Asymptotic,
    /// `M⁻¹ Σ_U M⁻ᵀ` with the bounded `Var(U_a)`, `Var(U_b)`.
    PluginUpper,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Asymptotic => "asymptotic",
            Regime::PluginUpper => "plugin_upper",
        }
    }
}

/// Covariance of `(σ̂²_A, σ̂²_B, σ̂²_E)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaCovariance {
    pub matrix: [[f64; 3]; 3],
    pub regime: Regime,
    pub delta: f64,
    pub delta0: f64,
    /// Set when a diagonal entry came out negative.
    pub non_conservative: bool,
}

impl ThetaCovariance {
    pub fn diagonal(&self) -> [f64; 3] {
        [self.matrix[0][0], self.matrix[1][1], self.matrix[2][2]]
    }
}

pub fn asymptotic_diagonal(theta: &VarianceComponents, kappa: &Kurtoses, obs: &ObservationCounts) -> [f64; 3] {
    let n = obs.n as f64;
    [
        fourth(theta.sigma2_a, kappa.kappa_a) * obs.sum_ni2 / (n * n),
        fourth(theta.sigma2_b, kappa.kappa_b) * obs.sum_nj2 / (n * n),
        fourth(theta.sigma2_e, kappa.kappa_e) / n,
    ]
}

pub fn theta_cov_asymptotic(
    theta: &VarianceComponents,
    kappa: &Kurtoses,
    obs: &ObservationCounts,
    delta0: f64,
) -> Result<ThetaCovariance> {
    if obs.delta > delta0 {
        return Err(Error::DeltaTooLarge { delta: obs.delta, delta0 });
    }
    let d = asymptotic_diagonal(theta, kappa, obs);
    let mut matrix = [[0.0; 3]; 3];
    for k in 0..3 {
        matrix[k][k] = d[k];
    }
    Ok(ThetaCovariance { matrix, regime: Regime::Asymptotic, delta: obs.delta, delta0, non_conservative: false })
}

/// `M⁻¹ Σ_U M⁻ᵀ`.
pub fn theta_cov_plugin(ucov: &UCovariance, m: &MomentMatrix, delta: f64, delta0: f64) -> Result<ThetaCovariance> {
    let inv = m.inverse()?;
    let s = &ucov.matrix;
    let mut tmp = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            tmp[r][c] = (0..3).map(|k| inv[r][k] * s[k][c]).sum();
        }
    }
    let mut matrix = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            matrix[r][c] = (0..3).map(|k| tmp[r][k] * inv[c][k]).sum();
        }
    }
    for r in 0..3 {
        for c in 0..r {
            let v = 0.5 * (matrix[r][c] + matrix[c][r]);
            matrix[r][c] = v;
            matrix[c][r] = v;
        }
    }
    let non_conservative = (0..3).any(|k| matrix[k][k] < 0.0);
    Ok(ThetaCovariance { matrix, regime: Regime::PluginUpper, delta, delta0, non_conservative })
}

/// Exact evaluation of `Var(U_a)`, `Var(U_b)` and `Var(U_e)` by enumerating
/// co-observation counts. Cost is `Σ_j N_j²` (resp. `Σ_i N_i²`, `R·C`), so
/// these are for checking the streaming formulas on small instances.
pub mod dense {
    use std::collections::HashMap;

    use super::fourth;
    use crate::error::{Error, Result};
    use crate::model::{Kurtoses, VarianceComponents};

    pub const PAIR_LIMIT: u64 = 10_000_000;

    fn group_sizes(cells: &[(usize, usize)]) -> (Vec<u64>, Vec<u64>) {
        let r = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let c = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut ni = vec![0u64; r];
        let mut nj = vec![0u64; c];
        for &(i, j) in cells {
            ni[i] += 1;
            nj[j] += 1;
        }
        (ni, nj)
    }

    /// `(ZZᵀ)_ir` for all pairs of rows sharing a column, including `i = r`.
    fn co_counts(cells: &[(usize, usize)], by_col: bool) -> Result<HashMap<(usize, usize), u64>> {
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for &(i, j) in cells {
            let (g, m) = if by_col { (j, i) } else { (i, j) };
            groups.entry(g).or_default().push(m);
        }
        let size: u64 = groups.values().map(|v| (v.len() as u64).pow(2)).sum();
        if size > PAIR_LIMIT {
            return Err(Error::InstanceTooLarge { size, limit: PAIR_LIMIT });
        }
        let mut out = HashMap::new();
        for members in groups.values() {
            for &a in members {
                for &b in members {
                    *out.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
        Ok(out)
    }

    fn var_u_group(
        sizes: &[u64],
        co: &HashMap<(usize, usize), u64>,
        other: f64,
        kappa_other: f64,
        e: f64,
        kappa_e: f64,
    ) -> f64 {
        let mut t1 = 0.0;
        let mut t2 = 0.0;
        for (&(i, r), &z) in co {
            let (ni, nr) = (sizes[i] as f64, sizes[r] as f64);
            let z = z as f64;
            t1 += z * (1.0 - 1.0 / ni) * (1.0 - 1.0 / nr);
            t2 += z * (z - 1.0) / (ni * nr);
        }
        let n: f64 = sizes.iter().map(|&k| k as f64).sum();
        let groups = sizes.iter().filter(|&&k| k > 0);
        let t4: f64 = groups.clone().map(|&k| k as f64 * (1.0 - 1.0 / k as f64).powi(2)).sum();
        let t5: f64 = groups.clone().map(|&k| 1.0 - 1.0 / k as f64).sum();
        let g = groups.count() as f64;
        fourth(other, kappa_other) * t1
            + 2.0 * other * other * t2
            + 4.0 * other * e * (n - g)
            + fourth(e, kappa_e) * t4
            + 2.0 * e * e * t5
    }

    /// Exact `Var(U_a)` for the cells `(row, col)` with dense indices.
    pub fn var_ua_exact_dense(theta: &VarianceComponents, kappa: &Kurtoses, cells: &[(usize, usize)]) -> Result<f64> {
        let (ni, _) = group_sizes(cells);
        let co = co_counts(cells, true)?;
        Ok(var_u_group(&ni, &co, theta.sigma2_b, kappa.kappa_b, theta.sigma2_e, kappa.kappa_e))
    }

    /// Exact `Var(U_b)`.
    pub fn var_ub_exact_dense(theta: &VarianceComponents, kappa: &Kurtoses, cells: &[(usize, usize)]) -> Result<f64> {
        let (_, nj) = group_sizes(cells);
        let co = co_counts(cells, false)?;
        Ok(var_u_group(&nj, &co, theta.sigma2_a, kappa.kappa_a, theta.sigma2_e, kappa.kappa_e))
    }

    /// `Σ_ij (N_i N_j - N Z_ij)²` over all rows and columns with observations.
    pub fn chi_square_dense(cells: &[(usize, usize)]) -> Result<f64> {
        let (ni, nj) = group_sizes(cells);
        let size = (ni.len() * nj.len()) as u64;
        if size > PAIR_LIMIT {
            return Err(Error::InstanceTooLarge { size, limit: PAIR_LIMIT });
        }
        let n = cells.len() as f64;
        let mut z = vec![false; ni.len() * nj.len()];
        for &(i, j) in cells {
            z[i * nj.len() + j] = true;
        }
        let mut total = 0.0;
        for (i, &a) in ni.iter().enumerate().filter(|x| *x.1 > 0) {
            for (j, &b) in nj.iter().enumerate().filter(|x| *x.1 > 0) {
                let zij = if z[i * nj.len() + j] { n } else { 0.0 };
                let d = (a * b) as f64 - zij;
                total += d * d;
            }
        }
        Ok(total)
    }
}
