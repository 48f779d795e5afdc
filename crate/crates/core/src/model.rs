//! Model parameters, synthetic data generation and the grand-mean estimator.

use std::fmt::Display;
use std::hash::Hash;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::pass::FirstPassSummary;

/// Row or column identifier. Anything hashable and printable works; the
/// passes map keys to dense indices in first-seen order.
pub trait Key: Eq + Hash + Clone + Display {}
impl<T: Eq + Hash + Clone + Display> Key for T {}

/// One observation `(row, col, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple<K> {
    pub row: K,
    pub col: K,
    pub value: f64,
}

impl<K> Triple<K> {
    pub fn new(row: K, col: K, value: f64) -> Self {
        Self { row, col, value }
    }
}

/// True variance components. Estimates live in [`crate::moments::ThetaEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VarianceComponents {
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    pub sigma2_e: f64,
}

impl VarianceComponents {
    pub fn new(sigma2_a: f64, sigma2_b: f64, sigma2_e: f64) -> Result<Self> {
        let v = Self { sigma2_a, sigma2_b, sigma2_e };
        if v.as_array().iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "variance components must be finite and nonnegative, got {sigma2_a}, {sigma2_b}, {sigma2_e}"
            )));
        }
        Ok(v)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma2_a, self.sigma2_b, self.sigma2_e]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self { sigma2_a: v[0], sigma2_b: v[1], sigma2_e: v[2] }
    }

    pub fn total(&self) -> f64 {
        self.sigma2_a + self.sigma2_b + self.sigma2_e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Kurtoses {
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub kappa_e: f64,
}

impl Kurtoses {
    pub const GAUSSIAN: Kurtoses = Kurtoses { kappa_a: 0.0, kappa_b: 0.0, kappa_e: 0.0 };

    pub fn new(kappa_a: f64, kappa_b: f64, kappa_e: f64) -> Result<Self> {
        let k = Self { kappa_a, kappa_b, kappa_e };
        if k.as_array().iter().any(|x| !x.is_finite() || *x < -2.0) {
            return Err(Error::InvalidParameter(format!(
                "kurtoses must be finite and at least -2, got {kappa_a}, {kappa_b}, {kappa_e}"
            )));
        }
        Ok(k)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.kappa_a, self.kappa_b, self.kappa_e]
    }

    pub fn from_array(k: [f64; 3]) -> Self {
        Self { kappa_a: k[0], kappa_b: k[1], kappa_e: k[2] }
    }
}

/// Distribution family for one random factor, scaled to a given variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EffectLaw {
    #[default]
    Normal,
    /// Symmetric uniform, kurtosis -1.2.
    Uniform,
    /// Exponential shifted to mean zero, kurtosis 6.
    CenteredExponential,
}

impl EffectLaw {
    pub fn kurtosis(&self) -> f64 {
        match self {
            EffectLaw::Normal => 0.0,
            EffectLaw::Uniform => -1.2,
            EffectLaw::CenteredExponential => 6.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, variance: f64, rng: &mut R) -> f64 {
        if variance == 0.0 {
            return 0.0;
        }
        let sd = variance.sqrt();
        match self {
            EffectLaw::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            }
            EffectLaw::Uniform => {
                let half_width = (3.0 * variance).sqrt();
                rng.random_range(-half_width..half_width)
            }
            EffectLaw::CenteredExponential => {
                let x: f64 = Exp::new(1.0).expect("unit rate").sample(rng);
                sd * (x - 1.0)
            }
        }
    }
}

impl std::str::FromStr for EffectLaw {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "gaussian" => Ok(EffectLaw::Normal),
            "uniform" => Ok(EffectLaw::Uniform),
            "exponential" | "centered-exponential" => Ok(EffectLaw::CenteredExponential),
            other => Err(Error::InvalidParameter(format!("unknown effect law '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub mu: f64,
    pub theta: VarianceComponents,
    /// Laws for the row effect, column effect and noise, in that order.
    pub laws: [EffectLaw; 3],
}

impl ModelParams {
    pub fn gaussian(mu: f64, theta: VarianceComponents) -> Self {
        Self { mu, theta, laws: [EffectLaw::Normal; 3] }
    }

    pub fn with_laws(mu: f64, theta: VarianceComponents, laws: [EffectLaw; 3]) -> Self {
        Self { mu, theta, laws }
    }

    pub fn kurtoses(&self) -> Kurtoses {
        Kurtoses::from_array(self.laws.map(|l| l.kurtosis()))
    }
}

/// Grid shape and sampling settings for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSpec {
    pub rows: usize,
    pub cols: usize,
    pub observe_prob: f64,
    pub seed: u64,
}

/// Row-major stream of simulated triples with `u32` keys.
///
/// Row and column effects come from ChaCha stream 0; row `i` draws its
/// inclusion coins and noise from stream `i + 1`, so any block of rows can be
/// regenerated on its own.
#[derive(Debug, Clone)]
pub struct Simulation {
    params: ModelParams,
    spec: SimulationSpec,
    row_effects: Vec<f64>,
    col_effects: Vec<f64>,
    rows: Range<usize>,
    row: usize,
    col: usize,
    rng: ChaCha8Rng,
}

pub fn simulate(params: &ModelParams, spec: SimulationSpec) -> Result<Simulation> {
    simulate_rows(params, spec, 0..spec.rows)
}

/// Simulates only the given block of rows of the grid described by `spec`.
pub fn simulate_rows(params: &ModelParams, spec: SimulationSpec, rows: Range<usize>) -> Result<Simulation> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(Error::InvalidParameter("grid dimensions must be positive".into()));
    }
    if !(spec.observe_prob > 0.0 && spec.observe_prob <= 1.0) {
        return Err(Error::InvalidParameter(format!("observe_prob must lie in (0, 1], got {}", spec.observe_prob)));
    }
    if rows.end > spec.rows || rows.start > rows.end {
        return Err(Error::InvalidParameter(format!("row block {rows:?} outside 0..{}", spec.rows)));
    }
    if spec.rows > u32::MAX as usize || spec.cols > u32::MAX as usize {
        return Err(Error::InvalidParameter("grid dimensions exceed u32 keys".into()));
    }
    VarianceComponents::new(params.theta.sigma2_a, params.theta.sigma2_b, params.theta.sigma2_e)?;
    if !params.mu.is_finite() {
        return Err(Error::InvalidParameter("mu must be finite".into()));
    }
    let mut effects_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    effects_rng.set_stream(0);
    let row_effects = (0..spec.rows).map(|_| params.laws[0].sample(params.theta.sigma2_a, &mut effects_rng)).collect();
    let col_effects = (0..spec.cols).map(|_| params.laws[1].sample(params.theta.sigma2_b, &mut effects_rng)).collect();
    let mut sim = Simulation {
        params: *params,
        spec,
        row_effects,
        col_effects,
        row: rows.start,
        rows,
        col: 0,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    sim.reset_row_rng();
    Ok(sim)
}

impl Simulation {
    fn reset_row_rng(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        self.rng.set_stream(self.row as u64 + 1);
    }

    pub fn row_effects(&self) -> &[f64] {
        &self.row_effects
    }

    pub fn col_effects(&self) -> &[f64] {
        &self.col_effects
    }
}

impl Iterator for Simulation {
    type Item = Triple<u32>;

    fn next(&mut self) -> Option<Triple<u32>> {
        while self.row < self.rows.end {
            while self.col < self.spec.cols {
                let j = self.col;
                self.col += 1;
                let keep = self.spec.observe_prob >= 1.0 || self.rng.random::<f64>() < self.spec.observe_prob;
                if !keep {
                    continue;
                }
                let e = self.params.laws[2].sample(self.params.theta.sigma2_e, &mut self.rng);
                let value = self.params.mu + self.row_effects[self.row] + self.col_effects[j] + e;
                return Some(Triple::new(self.row as u32, j as u32, value));
            }
            self.row += 1;
            self.col = 0;
            if self.row < self.rows.end {
                self.reset_row_rng();
            }
        }
        None
    }
}

/// Grand mean and its sampling variance under the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrandMean {
    pub mu_hat: f64,
    /// `σ²_A ΣN_i²/N² + σ²_B ΣN_j²/N² + σ²_E/N`.
    pub variance: f64,
    /// Looser bound `ε_R σ²_A + ε_C σ²_B + σ²_E/N`.
    pub eps_bound: f64,
}

pub fn grand_mean<K: Key>(fp: &FirstPassSummary<K>, theta: &VarianceComponents) -> Result<GrandMean> {
    if fp.n() == 0 {
        return Err(Error::EmptyData);
    }
    let counts = fp.count_sums()?;
    let n = counts.n as f64;
    let n2 = n * n;
    let variance =
        theta.sigma2_a * counts.sum_ni2 as f64 / n2 + theta.sigma2_b * counts.sum_nj2 as f64 / n2 + theta.sigma2_e / n;
    let eps_bound =
        counts.max_ni as f64 / n * theta.sigma2_a + counts.max_nj as f64 / n * theta.sigma2_b + theta.sigma2_e / n;
    Ok(GrandMean { mu_hat: fp.global.mean, variance, eps_bound })
}
