//! U and W statistics, the moment matrix, and the variance/kurtosis solves.

use crate::error::{Component, Error, Result};
use crate::model::{Key, Kurtoses, VarianceComponents};
use crate::pass::{CountSums, FirstPassSummary, SecondPassSummary};
use crate::sum::csum;

/// Within-row, within-column and global pair statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UStatistics {
    pub u_a: f64,
    pub u_b: f64,
    pub u_e: f64,
}

impl UStatistics {
    pub fn as_array(&self) -> [f64; 3] {
        [self.u_a, self.u_b, self.u_e]
    }
}

pub fn u_stats<K: Key>(fp: &FirstPassSummary<K>) -> UStatistics {
    UStatistics {
        u_a: csum(fp.rows().iter().map(|g| g.m2)),
        u_b: csum(fp.cols().iter().map(|g| g.m2)),
        u_e: fp.n() as f64 * fp.global.m2,
    }
}

/// U statistics from the second-pass central sums, which agree with
/// [`u_stats`] up to rounding but do not depend on how the stream was sharded.
pub fn u_stats_refined<K: Key>(fp: &FirstPassSummary<K>, sp: &SecondPassSummary) -> UStatistics {
    UStatistics {
        u_a: csum(sp.second_row.iter().copied()),
        u_b: csum(sp.second_col.iter().copied()),
        u_e: fp.n() as f64 * sp.second_global,
    }
}

/// Fourth-power analogues of the U statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WStatistics {
    pub w_a: f64,
    pub w_b: f64,
    pub w_e: f64,
}

impl WStatistics {
    pub fn as_array(&self) -> [f64; 3] {
        [self.w_a, self.w_b, self.w_e]
    }
}

pub fn w_stats<K: Key>(fp: &FirstPassSummary<K>, sp: &SecondPassSummary) -> WStatistics {
    let group = |groups: &[crate::accum::GroupAccumulator], second: &[f64], fourth: &[f64]| {
        csum(groups.iter().zip(second).zip(fourth).map(|((g, &m2), &f4)| f4 + 3.0 * m2 * m2 / g.n as f64))
    };
    WStatistics {
        w_a: group(fp.rows(), &sp.second_row, &sp.fourth_row),
        w_b: group(fp.cols(), &sp.second_col, &sp.fourth_col),
        w_e: fp.n() as f64 * sp.fourth_global + 3.0 * sp.second_global * sp.second_global,
    }
}

/// The 3×3 matrix mapping `(σ²_A, σ²_B, σ²_E)` to `E(U_a, U_b, U_e)`:
///
/// ```text
/// [ 0          N - R      N - R  ]
/// [ N - C      0          N - C  ]
/// [ N² - ΣN_i² N² - ΣN_j² N² - N ]
/// ```
///
/// Its determinant is `(N - R)(N - C)(N² - ΣN_i² - ΣN_j² + N)`; the integer
/// factors are kept exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentMatrix {
    pub entries: [[f64; 3]; 3],
    pub det: f64,
    n_minus_r: i128,
    n_minus_c: i128,
    /// `N² - ΣN_i² - ΣN_j² + N`.
    cross: i128,
    n: f64,
}

pub fn moment_matrix(counts: &CountSums) -> MomentMatrix {
    let n = counts.n as i128;
    let n2 = n * n;
    let p = n - counts.r as i128;
    let q = n - counts.c as i128;
    let x = n2 - counts.sum_ni2 as i128;
    let y = n2 - counts.sum_nj2 as i128;
    let z = n2 - n;
    let cross = n2 - counts.sum_ni2 as i128 - counts.sum_nj2 as i128 + n;
    let (pf, qf) = (p as f64, q as f64);
    MomentMatrix {
        entries: [[0.0, pf, pf], [qf, 0.0, qf], [x as f64, y as f64, z as f64]],
        det: pf * qf * cross as f64,
        n_minus_r: p,
        n_minus_c: q,
        cross,
        n: n as f64,
    }
}

impl MomentMatrix {
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.entries;
        [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
    }

    /// Errors unless the matrix is safely invertible. The tolerance is
    /// `1e-9 · (N - R)(N - C)N²`, i.e. `|cross| < 1e-9 N²`.
    pub fn check(&self) -> Result<()> {
        let mut unidentified = Vec::new();
        let mut reasons = Vec::new();
        if self.n_minus_c == 0 {
            unidentified.push(Component::A);
            reasons.push("every column has a single observation");
        }
        if self.n_minus_r == 0 {
            unidentified.push(Component::B);
            reasons.push("every row has a single observation");
        }
        if unidentified.is_empty() && (self.cross as f64).abs() < 1e-9 * self.n * self.n {
            unidentified = vec![Component::A, Component::B, Component::E];
            reasons.push("a single row or column holds too much of the data");
        }
        if unidentified.is_empty() {
            return Ok(());
        }
        let names: Vec<String> = unidentified.iter().map(|c| c.to_string()).collect();
        Err(Error::SingularSystem {
            reason: format!("{}; cannot identify {}", reasons.join(" and "), names.join(", ")),
            unidentified,
        })
    }

    /// Inverse in closed form, rows ordered `(A, B, E)`.
    pub fn inverse(&self) -> Result<[[f64; 3]; 3]> {
        self.check()?;
        let p = self.n_minus_r as f64;
        let q = self.n_minus_c as f64;
        let d = self.cross as f64;
        let x = self.entries[2][0];
        let y = self.entries[2][1];
        let e_row = [y / (p * d), x / (q * d), -1.0 / d];
        Ok([[-e_row[0], 1.0 / q - e_row[1], -e_row[2]], [1.0 / p - e_row[0], -e_row[1], -e_row[2]], e_row])
    }

    /// Solves `M v = rhs` by elimination along the matrix's zero pattern:
    /// the first two rows give `v_B + v_E` and `v_A + v_E` directly.
    pub fn solve(&self, rhs: [f64; 3]) -> Result<[f64; 3]> {
        self.check()?;
        let p = self.n_minus_r as f64;
        let q = self.n_minus_c as f64;
        let d = self.cross as f64;
        let b_plus_e = rhs[0] / p;
        let a_plus_e = rhs[1] / q;
        let e = (self.entries[2][0] * a_plus_e + self.entries[2][1] * b_plus_e - rhs[2]) / d;
        Ok([a_plus_e - e, b_plus_e - e, e])
    }
}

/// Per-component fourth moments and kurtoses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourthMoments {
    pub mu4: [f64; 3],
    /// `μ4/σ⁴ - 3` before flooring; `None` when the variance estimate is not positive.
    pub kappa_raw: [Option<f64>; 3],
    /// Kurtoses fed to the variance formulas: floored at -2, undefined entries set to 0
    /// (their variance is clamped to 0, so the value never matters).
    pub kappa: Kurtoses,
    pub floored: [bool; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    /// Raw solution of the moment equations; may be negative.
    pub sigma2: [f64; 3],
    pub clamped: VarianceComponents,
    pub moments: Option<FourthMoments>,
}

impl ThetaEstimate {
    pub fn kappa(&self, component: Component) -> Result<f64> {
        let idx = component as usize;
        self.moments.and_then(|m| m.kappa_raw[idx].map(|k| k.max(-2.0))).ok_or(Error::UndefinedKurtosis(component))
    }
}

pub fn solve_theta(u: &UStatistics, m: &MomentMatrix) -> Result<ThetaEstimate> {
    let sigma2 = m.solve(u.as_array())?;
    Ok(ThetaEstimate { sigma2, clamped: VarianceComponents::from_array(sigma2.map(|s| s.max(0.0))), moments: None })
}

/// Offsets `m(θ)` so that `E(W) = M μ4 + m(θ)`.
pub fn w_offsets(theta: [f64; 3], counts: &CountSums) -> [f64; 3] {
    let [a, b, e] = theta;
    let n = counts.n as f64;
    let n2 = n * n;
    let ni2 = counts.sum_ni2 as f64;
    let nj2 = counts.sum_nj2 as f64;
    let cross = (counts.n as i128 * counts.n as i128 - counts.sum_ni2 as i128 - counts.sum_nj2 as i128
        + counts.n as i128) as f64;
    [
        (3.0 * b * b + 12.0 * b * e + 3.0 * e * e) * (n - counts.r as f64),
        (3.0 * a * a + 12.0 * a * e + 3.0 * e * e) * (n - counts.c as f64),
        (3.0 * a * a + 12.0 * a * e) * (n2 - ni2)
            + (3.0 * b * b + 12.0 * b * e) * (n2 - nj2)
            + 3.0 * e * e * (n2 - n)
            + 12.0 * a * b * cross,
    ]
}

/// Solves for fourth moments using the raw variance estimates in the offsets.
/// `tol_var` is the threshold below which a variance estimate counts as zero.
pub fn solve_kurtoses(
    theta: &ThetaEstimate,
    w: &WStatistics,
    m: &MomentMatrix,
    counts: &CountSums,
    tol_var: f64,
) -> Result<ThetaEstimate> {
    let offsets = w_offsets(theta.sigma2, counts);
    let wv = w.as_array();
    let mu4 = m.solve([wv[0] - offsets[0], wv[1] - offsets[1], wv[2] - offsets[2]])?;
    let mut kappa_raw = [None; 3];
    let mut kappa = [0.0; 3];
    let mut floored = [false; 3];
    for k in 0..3 {
        let s = theta.sigma2[k];
        if s > tol_var {
            let raw = mu4[k] / (s * s) - 3.0;
            kappa_raw[k] = Some(raw);
            floored[k] = raw < -2.0;
            kappa[k] = raw.max(-2.0);
        }
    }
    Ok(ThetaEstimate {
        moments: Some(FourthMoments { mu4, kappa_raw, kappa: Kurtoses::from_array(kappa), floored }),
        ..*theta
    })
}

/// `1e-12` times the sample variance of all values.
pub fn default_tol_var<K: Key>(fp: &FirstPassSummary<K>) -> f64 {
    if fp.n() < 2 {
        0.0
    } else {
        1e-12 * fp.global.m2 / (fp.n() - 1) as f64
    }
}
