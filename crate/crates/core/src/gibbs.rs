//! Gibbs sampling of the random effects with the variances held fixed, on
//! balanced data, and its closed-form convergence rate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Key, Triple, VarianceComponents};
use crate::pass::Interner;

/// Minimum post burn-in length accepted by [`empirical_rate`].
pub const MIN_CHAIN: usize = 5_000;
/// Lags whose autocorrelation exceeds this enter the rate fit.
pub const ACF_FLOOR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsRate {
    pub rho: f64,
    /// Set when zero noise variance puts the rate on its limit of 1.
    pub boundary: bool,
}

/// Geometric convergence rate of the alternating a | b, b | a sampler on an
/// `r × c` balanced grid:
/// `ρ = r·c·σ²_A·σ²_B / ((σ²_E + c·σ²_A)(σ²_E + r·σ²_B))`.
pub fn gibbs_rate(r: usize, c: usize, theta: &VarianceComponents) -> Result<GibbsRate> {
    let [a, b, e] = theta.as_array();
    if r == 0 || c == 0 {
        return Err(Error::InvalidParameter("grid dimensions must be positive".into()));
    }
    if a == 0.0 && b == 0.0 && e == 0.0 {
        return Err(Error::InvalidParameter("all variance components are zero".into()));
    }
    if a == 0.0 || b == 0.0 {
        return Ok(GibbsRate { rho: 0.0, boundary: false });
    }
    if e == 0.0 {
        return Ok(GibbsRate { rho: 1.0, boundary: true });
    }
    let (r, c) = (r as f64, c as f64);
    let rho = (b / (b + e / r)) * (a / (a + e / c));
    Ok(GibbsRate { rho, boundary: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsConfig {
    pub r: usize,
    pub c: usize,
    pub mu: f64,
    pub theta: VarianceComponents,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.c == 0 {
            return Err(Error::InvalidParameter("grid dimensions must be positive".into()));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::InvalidParameter(format!(
                "iterations ({}) must exceed burn_in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.theta.as_array().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("Gibbs sampling needs all variance components positive".into()));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidParameter("mu must be finite".into()));
        }
        Ok(())
    }
}

/// Full `r × c` grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedData {
    pub r: usize,
    pub c: usize,
    pub values: Vec<f64>,
}

impl BalancedData {
    pub fn new(r: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if r == 0 || c == 0 || values.len() != r * c {
            return Err(Error::NonBalancedData);
        }
        Ok(Self { r, c, values })
    }

    /// Lays out triples on a grid indexed by first-seen row and column keys.
    /// Fails unless every cell appears exactly once.
    pub fn from_triples<K: Key>(triples: impl IntoIterator<Item = Triple<K>>) -> Result<Self> {
        let mut rows = Interner::<K>::default();
        let mut cols = Interner::<K>::default();
        let mut cells = Vec::new();
        for t in triples {
            if !t.value.is_finite() {
                return Err(Error::NonFiniteValue(t.value));
            }
            cells.push((rows.intern_owned(t.row).0, cols.intern_owned(t.col).0, t.value));
        }
        let (r, c) = (rows.len(), cols.len());
        if r == 0 || cells.len() != r * c {
            return Err(Error::NonBalancedData);
        }
        let mut values = vec![f64::NAN; r * c];
        for (i, j, v) in cells {
            let slot = &mut values[i * c + j];
            if !slot.is_nan() {
                return Err(Error::NonBalancedData);
            }
            *slot = v;
        }
        Ok(Self { r, c, values })
    }

    fn row_sums(&self) -> Vec<f64> {
        self.values.chunks(self.c).map(|row| row.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        for row in self.values.chunks(self.c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

/// Post burn-in draws, `r` row effects then `c` column effects per kept iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsChain {
    pub r: usize,
    pub c: usize,
    pub row_draws: Vec<f64>,
    pub col_draws: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    SumA,
    SumB,
}

impl GibbsChain {
    pub fn len(&self) -> usize {
        self.row_draws.len() / self.r
    }

    pub fn is_empty(&self) -> bool {
        self.row_draws.is_empty()
    }

    pub fn row_effects(&self, t: usize) -> &[f64] {
        &self.row_draws[t * self.r..(t + 1) * self.r]
    }

    pub fn col_effects(&self, t: usize) -> &[f64] {
        &self.col_draws[t * self.c..(t + 1) * self.c]
    }

    pub fn series(&self, f: Functional) -> Vec<f64> {
        match f {
            Functional::SumA => self.row_draws.chunks(self.r).map(|x| x.iter().sum()).collect(),
            Functional::SumB => self.col_draws.chunks(self.c).map(|x| x.iter().sum()).collect(),
        }
    }

    /// Per-coordinate mean of the row effects over the chain.
    pub fn row_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.r];
        for draw in self.row_draws.chunks(self.r) {
            for (o, v) in out.iter_mut().zip(draw) {
                *o += v;
            }
        }
        let t = self.len() as f64;
        out.iter_mut().for_each(|o| *o /= t);
        out
    }
}

/// Runs the sampler starting from all-zero effects. Each conditional is normal
/// with a shared diagonal precision, so a sweep costs `O(r + c)` after the
/// row and column sums are formed once.
pub fn run_gibbs_phi(cfg: &GibbsConfig, data: &BalancedData) -> Result<GibbsChain> {
    cfg.validate()?;
    if data.r != cfg.r || data.c != cfg.c || data.values.len() != cfg.r * cfg.c {
        return Err(Error::NonBalancedData);
    }
    let [sa, sb, se] = cfg.theta.as_array();
    let (r, c) = (cfg.r, cfg.c);
    let row_sums = data.row_sums();
    let col_sums = data.col_sums();
    let prec_a = 1.0 / sa + c as f64 / se;
    let prec_b = 1.0 / sb + r as f64 / se;
    let (sd_a, sd_b) = (prec_a.recip().sqrt(), prec_b.recip().sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut a = vec![0.0; r];
    let mut b = vec![0.0; c];
    let kept = cfg.iterations - cfg.burn_in;
    let mut row_draws = Vec::with_capacity(kept * r);
    let mut col_draws = Vec::with_capacity(kept * c);
    for t in 0..cfg.iterations {
        let sum_b: f64 = b.iter().sum();
        for (i, ai) in a.iter_mut().enumerate() {
            let mean = (row_sums[i] - c as f64 * cfg.mu - sum_b) / se / prec_a;
            let z: f64 = StandardNormal.sample(&mut rng);
            *ai = mean + sd_a * z;
        }
        let sum_a: f64 = a.iter().sum();
        for (j, bj) in b.iter_mut().enumerate() {
            let mean = (col_sums[j] - r as f64 * cfg.mu - sum_a) / se / prec_b;
            let z: f64 = StandardNormal.sample(&mut rng);
            *bj = mean + sd_b * z;
        }
        if t >= cfg.burn_in {
            row_draws.extend_from_slice(&a);
            col_draws.extend_from_slice(&b);
        }
    }
    Ok(GibbsChain { r, c, row_draws, col_draws })
}

/// Exact posterior mean of `(a, b)` from a dense solve with the joint precision.
/// Returns row effects followed by column effects.
pub fn posterior_mean_dense(cfg: &GibbsConfig, data: &BalancedData) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (r, c) = (cfg.r, cfg.c);
    if r + c > 2_000 {
        return Err(Error::InstanceTooLarge { size: (r + c) as u64, limit: 2_000 });
    }
    let [sa, sb, se] = cfg.theta.as_array();
    let dim = r + c;
    let q = DMatrix::from_fn(dim, dim, |x, y| match (x < r, y < r) {
        (true, true) if x == y => 1.0 / sa + c as f64 / se,
        (false, false) if x == y => 1.0 / sb + r as f64 / se,
        (true, false) | (false, true) => 1.0 / se,
        _ => 0.0,
    });
    let mut rhs = DVector::zeros(dim);
    for i in 0..r {
        for j in 0..c {
            let resid = (data.values[i * c + j] - cfg.mu) / se;
            rhs[i] += resid;
            rhs[r + j] += resid;
        }
    }
    let chol = q.cholesky().ok_or(Error::SingularPredictionSystem)?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub rho_theory: f64,
    pub rho_empirical: f64,
    /// Autocorrelations from lag 0 through the first lag at or below [`ACF_FLOOR`].
    pub acf: Vec<f64>,
}

/// Sample autocorrelations of `x` up to `max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var: f64 = centered.iter().map(|v| v * v).sum();
    if !(var > 0.0) {
        return Err(Error::DegenerateChain);
    }
    Ok((0..=max_lag.min(n - 1))
        .map(|k| centered[..n - k].iter().zip(&centered[k..]).map(|(u, v)| u * v).sum::<f64>() / var)
        .collect())
}

/// Averages `acf[k+1]/acf[k]` over the leading lags with `acf[k] > ACF_FLOOR`.
pub fn empirical_rate_of_series(series: &[f64], rho_theory: f64) -> Result<RateReport> {
    if series.len() < MIN_CHAIN {
        return Err(Error::ChainTooShort { len: series.len(), min: MIN_CHAIN });
    }
    let max_lag = series.len() / 4;
    let mut acf = autocorrelation(series, max_lag)?;
    let cut = acf.iter().position(|v| *v <= ACF_FLOOR).unwrap_or(acf.len() - 1);
    acf.truncate(cut + 1);
    let ratios: Vec<f64> = (0..cut).map(|k| acf[k + 1] / acf[k]).collect();
    if ratios.is_empty() {
        return Err(Error::DegenerateChain);
    }
    let rho_empirical = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(RateReport { rho_theory, rho_empirical, acf })
}

pub fn empirical_rate(chain: &GibbsChain, functional: Functional, theta: &VarianceComponents) -> Result<RateReport> {
    let rho = gibbs_rate(chain.r, chain.c, theta)?.rho;
    empirical_rate_of_series(&chain.series(functional), rho)
}
