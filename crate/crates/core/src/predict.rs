//! Shrinkage prediction of a cell from the grand, row and column totals.
//!
//! The predictor is `λ0·Y.. + λa·Y_i. + λb·Y_.j (+ λab·Y_ij)` built from
//! totals, not means, so unseen rows or columns simply get zero weight.

use crate::error::{Error, Result};
use crate::model::{Key, VarianceComponents};
use crate::pass::{FirstPassSummary, PatternSums, SecondPassSummary};

/// Counts describing the target cell and the data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellContext {
    pub n_i: f64,
    pub n_j: f64,
    pub z_ij: bool,
    /// `T_i = Σ_s Z_is N_s`; 0 for an unseen row.
    pub t_i: f64,
    pub t_j: f64,
    pub n: f64,
    pub sum_ni2: f64,
    pub sum_nj2: f64,
}

impl CellContext {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("cell context: {m}")));
        if self.z_ij && (self.n_i < 1.0 || self.n_j < 1.0) {
            return bad("an observed cell needs a seen row and column");
        }
        if self.t_i > self.n || self.t_j > self.n {
            return bad("co-observation totals exceed N");
        }
        if self.z_ij && (self.t_i < self.n_j || self.t_j < self.n_i) {
            return bad("co-observation totals too small for an observed cell");
        }
        if self.n < 1.0 {
            return bad("empty data set");
        }
        Ok(())
    }

    /// Context for the cell `(row, col)` given dense indices from the first pass
    /// (`None` for a key the data never contained) and whether it was observed.
    pub fn from_summaries<K: Key>(
        fp: &FirstPassSummary<K>,
        sp: &SecondPassSummary,
        pattern: &PatternSums,
        row: Option<usize>,
        col: Option<usize>,
        observed: bool,
    ) -> Result<Self> {
        let ctx = CellContext {
            n_i: row.map_or(0.0, |i| fp.rows()[i].n as f64),
            n_j: col.map_or(0.0, |j| fp.cols()[j].n as f64),
            z_ij: observed,
            t_i: row.map_or(0.0, |i| sp.t_row[i] as f64),
            t_j: col.map_or(0.0, |j| sp.t_col[j] as f64),
            n: pattern.n(),
            sum_ni2: pattern.counts.sum_ni2 as f64,
            sum_nj2: pattern.counts.sum_nj2 as f64,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    fn z(&self) -> f64 {
        if self.z_ij {
            1.0
        } else {
            0.0
        }
    }

    /// Size diagnostic for the asymptotic descriptions of the weights.
    /// Both factors seen: `max(1/n_i, 1/n_j, n_i/N, n_j/N)`. One seen:
    /// the co-observation share `T/N` of the seen factor. Neither: the
    /// grand-mean balance `max(ΣN_i²/N², ΣN_j²/N², 1/N)`.
    pub fn eta(&self) -> f64 {
        let n = self.n;
        match (self.n_i > 0.0, self.n_j > 0.0) {
            (true, true) => {
                [1.0 / self.n_i, 1.0 / self.n_j, self.n_i / n, self.n_j / n].into_iter().fold(0.0, f64::max)
            }
            (false, true) => self.t_j / n,
            (true, false) => self.t_i / n,
            (false, false) => [self.sum_ni2 / (n * n), self.sum_nj2 / (n * n), 1.0 / n].into_iter().fold(0.0, f64::max),
        }
    }
}

/// Normal equations `H λ = c` for one target cell. `dim` is 3 for the
/// shrinkage predictor and 4 when the cell's own value is included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionSystem {
    pub dim: usize,
    pub h: [[f64; 4]; 4],
    pub c: [f64; 4],
    /// Constant term of the quadratic loss `const - 2cᵀλ + λᵀHλ`.
    pub constant: f64,
}

/// Weights minimizing the error in predicting the observation `Y_ij`.
pub fn build_system(mu: f64, theta: &VarianceComponents, ctx: &CellContext) -> PredictionSystem {
    let m2 = mu * mu;
    let [a, b, e] = theta.as_array();
    let (n, ni, nj, z) = (ctx.n, ctx.n_i, ctx.n_j, ctx.z());
    let mut h = [[0.0; 4]; 4];
    h[0][0] = m2 * n * n + a * ctx.sum_ni2 + b * ctx.sum_nj2 + e * n;
    h[0][1] = m2 * n * ni + a * ni * ni + b * ctx.t_i + e * ni;
    h[0][2] = m2 * n * nj + a * ctx.t_j + b * nj * nj + e * nj;
    h[1][1] = m2 * ni * ni + a * ni * ni + b * ni + e * ni;
    h[1][2] = m2 * ni * nj + z * (a * ni + b * nj + e);
    h[2][2] = m2 * nj * nj + a * nj + b * nj * nj + e * nj;
    symmetrize(&mut h, 3);
    let c = [n * m2 + ni * a + nj * b + z * e, ni * m2 + ni * a + z * b + z * e, nj * m2 + z * a + nj * b + z * e, 0.0];
    PredictionSystem { dim: 3, h, c, constant: m2 + a + b + e }
}

/// Four-weight system for an observed cell, targeting `μ + a_i + b_j`.
pub fn build_smoothing_system(mu: f64, theta: &VarianceComponents, ctx: &CellContext) -> Result<PredictionSystem> {
    if !ctx.z_ij {
        return Err(Error::NotObserved);
    }
    let m2 = mu * mu;
    let [a, b, e] = theta.as_array();
    let (n, ni, nj) = (ctx.n, ctx.n_i, ctx.n_j);
    let mut sys = build_system(mu, theta, ctx);
    let h = &mut sys.h;
    h[0][3] = m2 * n + a * ni + b * nj + e;
    h[1][3] = m2 * ni + a * ni + b + e;
    h[2][3] = m2 * nj + a + b * nj + e;
    h[3][3] = m2 + a + b + e;
    symmetrize(h, 4);
    sys.dim = 4;
    sys.c = [m2 * n + a * ni + b * nj, m2 * ni + a * ni + b, m2 * nj + a + b * nj, m2 + a + b];
    sys.constant = m2 + a + b;
    Ok(sys)
}

fn symmetrize(h: &mut [[f64; 4]; 4], dim: usize) {
    for r in 0..dim {
        for c in 0..r {
            h[r][c] = h[c][r];
        }
    }
}

impl PredictionSystem {
    /// Quadratic loss at `λ` (padded with zeros beyond `dim`).
    pub fn loss(&self, lambda: &[f64; 4]) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        for r in 0..self.dim {
            lin += self.c[r] * lambda[r];
            for c in 0..self.dim {
                quad += lambda[r] * self.h[r][c] * lambda[c];
            }
        }
        self.constant - 2.0 * lin + quad
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageWeights {
    pub lambda0: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    /// Weight on the cell's own value; 0 unless smoothing.
    pub lambda_ab: f64,
    pub eta: f64,
}

impl ShrinkageWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda0, self.lambda_a, self.lambda_b, self.lambda_ab]
    }

    pub fn from_array(l: [f64; 4], eta: f64) -> Self {
        Self { lambda0: l[0], lambda_a: l[1], lambda_b: l[2], lambda_ab: l[3], eta }
    }
}

/// Solves the subsystem over `active` indices. `H` is a Gram matrix of the
/// totals, so it is positive semidefinite; elimination uses symmetric pivoting
/// on the largest remaining relative diagonal, and a direction whose residual
/// diagonal has collapsed is an exact linear dependence among the totals and
/// gets zero weight.
fn solve_active(sys: &PredictionSystem, active: &[usize]) -> Result<[f64; 4]> {
    let k = active.len();
    let mut a = [[0.0; 4]; 4];
    let mut rhs = [0.0; 4];
    let mut diag0 = [0.0; 4];
    for (r, &ir) in active.iter().enumerate() {
        for (c, &ic) in active.iter().enumerate() {
            a[r][c] = sys.h[ir][ic];
        }
        rhs[r] = sys.c[ir];
        diag0[r] = a[r][r];
    }
    if a.iter().flatten().chain(&rhs).any(|v| !v.is_finite()) {
        return Err(Error::SingularPredictionSystem);
    }
    let mut used = [false; 4];
    let mut order = Vec::with_capacity(k);
    for _ in 0..k {
        let pick = (0..k)
            .filter(|&p| !used[p] && diag0[p] > 0.0)
            .max_by(|&x, &y| (a[x][x] / diag0[x]).total_cmp(&(a[y][y] / diag0[y])));
        let Some(p) = pick else { break };
        if a[p][p] <= 1e-10 * diag0[p] {
            break;
        }
        used[p] = true;
        order.push(p);
        for r in (0..k).filter(|&r| !used[r]) {
            let f = a[r][p] / a[p][p];
            for c in 0..k {
                a[r][c] -= f * a[p][c];
            }
            rhs[r] -= f * rhs[p];
        }
    }
    if order.is_empty() {
        return Err(Error::SingularPredictionSystem);
    }
    let mut x = [0.0; 4];
    for (pos, &p) in order.iter().enumerate().rev() {
        let tail: f64 = order[pos + 1..].iter().map(|&q| a[p][q] * x[q]).sum();
        x[p] = (rhs[p] - tail) / a[p][p];
    }
    let mut out = [0.0; 4];
    for (r, &ir) in active.iter().enumerate() {
        out[ir] = x[r];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularPredictionSystem);
    }
    // Dropped directions are only harmless when c lies in the range of H.
    let cmax = active.iter().fold(0.0f64, |m, &i| m.max(sys.c[i].abs()));
    for &i in active {
        let resid: f64 = sys.c[i] - active.iter().map(|&j| sys.h[i][j] * out[j]).sum::<f64>();
        if resid.abs() > 1e-8 * cmax.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularPredictionSystem);
        }
    }
    Ok(out)
}

/// Solves `Hλ = c`. Unseen factors get zero weight, as does any total that is
/// a linear combination of the others (for example a row holding all the data).
pub fn solve_weights(sys: &PredictionSystem, ctx: &CellContext) -> Result<ShrinkageWeights> {
    let mut active = vec![0];
    if ctx.n_i > 0.0 {
        active.push(1);
    }
    if ctx.n_j > 0.0 {
        active.push(2);
    }
    if sys.dim == 4 && ctx.z_ij {
        active.push(3);
    }
    let l = solve_active(sys, &active)?;
    Ok(ShrinkageWeights::from_array(l, ctx.eta()))
}

/// Four-weight predictor for an observed cell. With zero noise variance the
/// cell's own value is exact for `μ + a_i + b_j`, so it gets all the weight.
pub fn smoothing_weights(mu: f64, theta: &VarianceComponents, ctx: &CellContext) -> Result<ShrinkageWeights> {
    let sys = build_smoothing_system(mu, theta, ctx)?;
    if theta.sigma2_e == 0.0 {
        return Ok(ShrinkageWeights::from_array([0.0, 0.0, 0.0, 1.0], ctx.eta()));
    }
    solve_weights(&sys, ctx)
}

/// Optimal self-weight when the other three weights are held at zero.
pub fn conditional_self_weight(mu: f64, theta: &VarianceComponents) -> f64 {
    let s = mu * mu + theta.sigma2_a + theta.sigma2_b;
    s / (s + theta.sigma2_e)
}

/// Totals entering the predictor. Unseen rows or columns have zero totals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellTotals {
    pub grand: f64,
    pub row: f64,
    pub col: f64,
    pub cell: Option<f64>,
}

impl CellTotals {
    pub fn from_summary<K: Key>(
        fp: &FirstPassSummary<K>,
        row: Option<usize>,
        col: Option<usize>,
        cell: Option<f64>,
    ) -> Self {
        Self {
            grand: fp.global.total(),
            row: row.map_or(0.0, |i| fp.rows()[i].total()),
            col: col.map_or(0.0, |j| fp.cols()[j].total()),
            cell,
        }
    }
}

pub fn predict(w: &ShrinkageWeights, totals: &CellTotals) -> f64 {
    let mut y = w.lambda0 * totals.grand + w.lambda_a * totals.row + w.lambda_b * totals.col;
    if let Some(v) = totals.cell {
        y += w.lambda_ab * v;
    }
    y
}

/// Mean squared error of the three-weight predictor for the observation `Y_ij`,
/// expanded term by term rather than through `H` and `c`.
pub fn shrinkage_mse(mu: f64, theta: &VarianceComponents, ctx: &CellContext, w: &ShrinkageWeights) -> f64 {
    let [a, b, e] = theta.as_array();
    let (l0, la, lb) = (w.lambda0, w.lambda_a, w.lambda_b);
    let (n, ni, nj, z) = (ctx.n, ctx.n_i, ctx.n_j, ctx.z());
    let bias = 1.0 - l0 * n - la * ni - lb * nj;
    mu * mu * bias * bias
        + l0 * l0 * (a * ctx.sum_ni2 + b * ctx.sum_nj2 + e * n)
        + la * la * (a * ni * ni + b * ni + e * ni)
        + lb * lb * (a * nj + b * nj * nj + e * nj)
        + a
        + b
        + e
        - 2.0 * l0 * (a * ni + b * nj + e * z)
        - 2.0 * la * (a * ni + b * z + e * z)
        - 2.0 * lb * (a * z + b * nj + e * z)
        + 2.0 * l0 * la * (a * ni * ni + b * ctx.t_i + e * ni)
        + 2.0 * l0 * lb * (a * ctx.t_j + b * nj * nj + e * nj)
        + 2.0 * la * lb * z * (a * ni + b * nj + e)
}

/// Dense best linear predictor over every observed cell; a reference for small instances.
pub mod blp {
    use nalgebra::{DMatrix, DVector};

    use crate::error::{Error, Result};
    use crate::model::VarianceComponents;

    pub const CELL_LIMIT: usize = 500;

    /// What the predictor is scored against.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Target {
        /// A fresh observation `Y_ij` including its own noise.
        Observation,
        /// The cell mean `μ + a_i + b_j`.
        CellMean,
    }

    /// Weights on each of `cells` minimizing the error for the cell mean at
    /// `target`. For an unobserved target these also minimize the error for
    /// a new observation there.
    pub fn blp_weights_dense(
        mu: f64,
        theta: &VarianceComponents,
        cells: &[(usize, usize)],
        target: (usize, usize),
    ) -> Result<Vec<f64>> {
        let n = cells.len();
        if n > CELL_LIMIT {
            return Err(Error::InstanceTooLarge { size: n as u64, limit: CELL_LIMIT as u64 });
        }
        let [a, b, e] = theta.as_array();
        let m2 = mu * mu;
        let mat = DMatrix::from_fn(n, n, |k, l| {
            let (rk, sk) = cells[k];
            let (rl, sl) = cells[l];
            m2 + if rk == rl { a } else { 0.0 } + if sk == sl { b } else { 0.0 } + if k == l { e } else { 0.0 }
        });
        let rhs = DVector::from_fn(n, |k, _| {
            let (r, s) = cells[k];
            m2 + if r == target.0 { a } else { 0.0 } + if s == target.1 { b } else { 0.0 }
        });
        let sol = mat.lu().solve(&rhs).ok_or(Error::SingularPredictionSystem)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularPredictionSystem);
        }
        Ok(sol.iter().copied().collect())
    }

    /// Mean squared error of the linear predictor `Σ λ_rs Y_rs` over `cells`.
    pub fn linear_mse(
        mu: f64,
        theta: &VarianceComponents,
        cells: &[(usize, usize)],
        weights: &[f64],
        target: (usize, usize),
        kind: Target,
    ) -> f64 {
        let [a, b, e] = theta.as_array();
        let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0).max(target.0 + 1);
        let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0).max(target.1 + 1);
        let mut row_sum = vec![0.0; rows];
        let mut col_sum = vec![0.0; cols];
        let mut total = 0.0;
        let mut sq = 0.0;
        let mut own = 0.0;
        for (&(r, s), &w) in cells.iter().zip(weights) {
            row_sum[r] += w;
            col_sum[s] += w;
            total += w;
            sq += w * w;
            if (r, s) == target {
                own = w;
            }
        }
        let bias = 1.0 - total;
        let observation = mu * mu * bias * bias
            + a
            + b
            + e
            + a * row_sum.iter().map(|x| x * x).sum::<f64>()
            + b * col_sum.iter().map(|x| x * x).sum::<f64>()
            + e * sq
            - 2.0 * (a * row_sum[target.0] + b * col_sum[target.1] + e * own);
        match kind {
            Target::Observation => observation,
            Target::CellMean => observation + 2.0 * e * own - e,
        }
    }
}
