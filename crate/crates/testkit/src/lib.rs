//! Reference computations for small observation patterns.
//!
//! Every statistic here is evaluated from its definition. The U statistics
//! are written as quadratic forms `xᵀAx` in the latent vector
//! `x = (a_1..a_R, b_1..b_C, e_1..e_N)` of independent zero-mean variables,
//! and exact moments come from the general identities
//! `E(xᵀAx) = Σ_k A_kk s_k` and
//! `Cov(xᵀAx, xᵀBx) = Σ_k A_kk B_kk κ_k s_k² + 2 Σ_kl A_kl B_kl s_k s_l`.
//! None of it shares code with the streaming formulas it is used to check.

use nalgebra::DMatrix;

/// Observed cells of an `rows × cols` grid. Rows or columns with no cells are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<(usize, usize)>,
}

impl Design {
    pub fn new(rows: usize, cols: usize, cells: Vec<(usize, usize)>) -> Self {
        let mut seen = std::collections::HashSet::new();
        for &(i, j) in &cells {
            assert!(i < rows && j < cols, "cell ({i}, {j}) outside {rows}x{cols}");
            assert!(seen.insert((i, j)), "duplicate cell ({i}, {j})");
        }
        Self { rows, cols, cells }
    }

    pub fn from_mask(rows: usize, cols: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                if keep(i, j) {
                    cells.push((i, j));
                }
            }
        }
        Self::new(rows, cols, cells)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_mask(rows, cols, |_, _| true)
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn row_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.rows];
        for &(i, _) in &self.cells {
            out[i] += 1;
        }
        out
    }

    pub fn col_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.cols];
        for &(_, j) in &self.cells {
            out[j] += 1;
        }
        out
    }

    /// Length of the latent vector.
    pub fn dim(&self) -> usize {
        self.rows + self.cols + self.n()
    }

    /// Latent coordinates `(a_i, b_j, e_k)` of observation `k`.
    fn coords(&self, k: usize) -> [usize; 3] {
        let (i, j) = self.cells[k];
        [i, self.rows + j, self.rows + self.cols + k]
    }

    /// Per-coordinate variances of the latent vector.
    pub fn latent_scale(&self, per_factor: [f64; 3]) -> Vec<f64> {
        let mut s = vec![per_factor[0]; self.rows];
        s.extend(std::iter::repeat_n(per_factor[1], self.cols));
        s.extend(std::iter::repeat_n(per_factor[2], self.n()));
        s
    }

    /// Values `μ + a_i + b_j + e_k` for a given latent draw.
    pub fn values(&self, mu: f64, latent: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|k| mu + self.coords(k).iter().map(|&c| latent[c]).sum::<f64>()).collect()
    }

    /// Ordered pairs of observations sharing a row, sharing a column, and all pairs.
    fn pair_groups(&self) -> [Vec<(usize, usize, f64)>; 3] {
        let rc = self.row_counts();
        let cc = self.col_counts();
        let n = self.n();
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for k in 0..n {
            for l in 0..n {
                if k == l {
                    continue;
                }
                let (ik, jk) = self.cells[k];
                let (il, jl) = self.cells[l];
                if ik == il {
                    out[0].push((k, l, 0.5 / rc[ik] as f64));
                }
                if jk == jl {
                    out[1].push((k, l, 0.5 / cc[jk] as f64));
                }
                out[2].push((k, l, 0.5));
            }
        }
        out
    }
}

/// `(U_a, U_b, U_e)` from half-weighted squared differences of ordered pairs:
/// within a row weighted by `1/N_i`, within a column by `1/N_j`, globally by 1.
pub fn u_brute(design: &Design, values: &[f64]) -> [f64; 3] {
    pair_power_sums(design, values, 2)
}

/// Fourth-power analogue of [`u_brute`].
pub fn w_brute(design: &Design, values: &[f64]) -> [f64; 3] {
    pair_power_sums(design, values, 4)
}

fn pair_power_sums(design: &Design, values: &[f64], power: i32) -> [f64; 3] {
    assert_eq!(values.len(), design.n());
    let groups = design.pair_groups();
    let mut out = [0.0; 3];
    for (o, g) in out.iter_mut().zip(&groups) {
        *o = g.iter().map(|&(k, l, w)| w * (values[k] - values[l]).powi(power)).sum();
    }
    out
}

/// Difference vector `Y_k - Y_l` in latent coordinates, as (coordinate, coefficient) pairs.
fn difference(design: &Design, k: usize, l: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = Vec::with_capacity(6);
    let mut add = |c: usize, w: f64| match v.iter_mut().find(|(x, _)| *x == c) {
        Some(e) => e.1 += w,
        None => v.push((c, w)),
    };
    for c in design.coords(k) {
        add(c, 1.0);
    }
    for c in design.coords(l) {
        add(c, -1.0);
    }
    v.retain(|(_, w)| *w != 0.0);
    v
}

/// Matrices `A` with `U = xᵀAx` for `U_a`, `U_b`, `U_e`.
pub fn u_quadratic_forms(design: &Design) -> [DMatrix<f64>; 3] {
    let d = design.dim();
    let groups = design.pair_groups();
    let mut out = [DMatrix::zeros(d, d), DMatrix::zeros(d, d), DMatrix::zeros(d, d)];
    for (mat, g) in out.iter_mut().zip(&groups) {
        for &(k, l, w) in g {
            let diff = difference(design, k, l);
            for &(p, cp) in &diff {
                for &(q, cq) in &diff {
                    mat[(p, q)] += w * cp * cq;
                }
            }
        }
    }
    out
}

/// Exact `E(U)` under variance components `theta`.
pub fn u_expectation(design: &Design, theta: [f64; 3]) -> [f64; 3] {
    let s = design.latent_scale(theta);
    u_quadratic_forms(design).map(|a| (0..s.len()).map(|k| a[(k, k)] * s[k]).sum())
}

/// The moment matrix: entry `(u, f)` is the coefficient of `σ²_f` in `E(U_u)`.
pub fn moment_matrix(design: &Design) -> [[f64; 3]; 3] {
    let cols = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].map(|t| u_expectation(design, t));
    let mut m = [[0.0; 3]; 3];
    for u in 0..3 {
        for f in 0..3 {
            m[u][f] = cols[f][u];
        }
    }
    m
}

/// Exact covariance matrix of `(U_a, U_b, U_e)`.
pub fn u_covariance(design: &Design, theta: [f64; 3], kappa: [f64; 3]) -> [[f64; 3]; 3] {
    let forms = u_quadratic_forms(design);
    let s = design.latent_scale(theta);
    let k = design.latent_scale(kappa);
    let d = s.len();
    let mut out = [[0.0; 3]; 3];
    for u in 0..3 {
        for v in u..3 {
            let (a, b) = (&forms[u], &forms[v]);
            let mut total = 0.0;
            for p in 0..d {
                total += a[(p, p)] * b[(p, p)] * k[p] * s[p] * s[p];
                for q in 0..d {
                    total += 2.0 * a[(p, q)] * b[(p, q)] * s[p] * s[q];
                }
            }
            out[u][v] = total;
            out[v][u] = total;
        }
    }
    out
}

/// Exact `E(W)`, using `E(ℓᵀx)⁴ = Σ ℓ_k⁴ κ_k s_k² + 3(Σ ℓ_k² s_k)²`.
pub fn w_expectation(design: &Design, theta: [f64; 3], kappa: [f64; 3]) -> [f64; 3] {
    let s = design.latent_scale(theta);
    let kap = design.latent_scale(kappa);
    let groups = design.pair_groups();
    groups.map(|g| {
        g.iter()
            .map(|&(k, l, w)| {
                let diff = difference(design, k, l);
                let quad: f64 = diff.iter().map(|&(c, x)| x * x * s[c]).sum();
                let excess: f64 = diff.iter().map(|&(c, x)| x.powi(4) * kap[c] * s[c] * s[c]).sum();
                w * (excess + 3.0 * quad * quad)
            })
            .sum()
    })
}

/// Mean squared error of `Σ_k λ_k Y_k` as a predictor of the cell `target`.
/// With `include_noise` the target is a new observation at that cell (its noise
/// is the observed one when the cell is in the design, a fresh draw otherwise);
/// without it the target is `μ + a_i + b_j`. Target rows or columns beyond the
/// design are fresh effects.
pub fn linear_predictor_mse(
    design: &Design,
    mu: f64,
    theta: [f64; 3],
    weights: &[f64],
    target: (usize, usize),
    include_noise: bool,
) -> f64 {
    assert_eq!(weights.len(), design.n());
    let s = design.latent_scale(theta);
    let mut coef = vec![0.0; design.dim()];
    for (k, &w) in weights.iter().enumerate() {
        for c in design.coords(k) {
            coef[c] += w;
        }
    }
    let mut fresh = 0.0;
    if target.0 < design.rows {
        coef[target.0] -= 1.0;
    } else {
        fresh += theta[0];
    }
    if target.1 < design.cols {
        coef[design.rows + target.1] -= 1.0;
    } else {
        fresh += theta[1];
    }
    if include_noise {
        match design.cells.iter().position(|&c| c == target) {
            Some(k) => coef[design.rows + design.cols + k] -= 1.0,
            None => fresh += theta[2],
        }
    }
    let bias = mu * (weights.iter().sum::<f64>() - 1.0);
    bias * bias + fresh + coef.iter().zip(&s).map(|(c, v)| c * c * v).sum::<f64>()
}

/// Monte Carlo summaries.
pub mod mc {
    /// Sample mean and its standard error.
    pub fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    /// Sample covariance and an approximate standard error, treating the
    /// centered products as i.i.d.
    pub fn cov_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
        assert_eq!(xs.len(), ys.len());
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
        let (m, se) = mean_se(&prods);
        (m * n / (n - 1.0), se)
    }

    /// `|estimate - target| ≤ k·se`.
    pub fn within(estimate: f64, target: f64, se: f64, k: f64) -> bool {
        (estimate - target).abs() <= k * se
    }
}
