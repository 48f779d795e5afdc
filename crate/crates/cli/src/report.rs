//! JSON report types. Floats are written with 17 significant digits so a
//! report round-trips to the same `f64` values; non-finite values become `null`.

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

/// One value per variance component.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PerComponent<T> {
    pub a: T,
    pub b: T,
    pub e: T,
}

impl<T: Copy> PerComponent<T> {
    pub fn from_array(v: [T; 3]) -> Self {
        Self { a: v[0], b: v[1], e: v[2] }
    }
}

pub fn nums(v: [f64; 3]) -> PerComponent<Num> {
    PerComponent::from_array(v.map(Num))
}

pub fn matrix(m: [[f64; 3]; 3]) -> [[Num; 3]; 3] {
    m.map(|row| row.map(Num))
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub unidentified: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Timings {
    pub pass1_ms: Num,
    pub pass2_ms: Num,
    pub solve_ms: Num,
}

#[derive(Debug, Clone, Serialize)]
pub struct Ratios {
    pub eps_r: Num,
    pub eps_c: Num,
    pub r_over_n: Num,
    pub c_over_n: Num,
    pub n_over_sum_ni2: Num,
    pub n_over_sum_nj2: Num,
    pub zn_mp_over_sum_ni2: Num,
    pub zn_pm_over_sum_nj2: Num,
}

#[derive(Debug, Clone, Serialize)]
pub struct Counts {
    pub n: u64,
    pub r: u64,
    pub c: u64,
    /// Triples read, before duplicate averaging.
    pub raw_count: u64,
    pub eps_r: Num,
    pub eps_c: Num,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Num>,
    pub delta0: Num,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Ratios>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrandMean {
    pub mu_hat: Num,
    pub variance: Num,
    pub eps_bound: Num,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theta {
    pub raw: PerComponent<Num>,
    pub clamped: PerComponent<Num>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Kappa {
    pub mu4: PerComponent<Num>,
    /// `null` where the variance estimate is not positive.
    pub raw: PerComponent<Option<Num>>,
    /// Values used by the covariance formulas.
    pub used: PerComponent<Num>,
    pub floored: PerComponent<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Covariance {
    pub regime: &'static str,
    pub matrix: [[Num; 3]; 3],
    pub standard_errors: PerComponent<Num>,
    pub non_conservative: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Statistics {
    pub u: PerComponent<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<PerComponent<Num>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub format_version: u32,
    pub command: &'static str,
    pub status: &'static str,
    pub counts: Counts,
    pub statistics: Statistics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grand_mean: Option<GrandMean>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Theta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Kappa>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Covariance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorReport>,
    pub timings: Timings,
}

#[derive(Debug, Clone, Serialize)]
pub struct Weights {
    pub lambda0: Num,
    pub lambda_a: Num,
    pub lambda_b: Num,
    pub lambda_ab: Num,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellPrediction {
    pub row: String,
    pub col: String,
    pub row_seen: bool,
    pub col_seen: bool,
    pub observed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Num>,
    /// `observation` for the three-weight predictor, `cell_mean` when smoothing.
    pub target: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Weights>,
    pub eta: Num,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_hat: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictReport {
    pub format_version: u32,
    pub command: &'static str,
    pub status: &'static str,
    pub n: u64,
    pub r: u64,
    pub c: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<Num>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_source: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<PerComponent<Num>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_source: Option<&'static str>,
    pub cells: Vec<CellPrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorReport>,
    pub timings: Timings,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainRate {
    pub rho_empirical: Num,
    pub acf: Vec<Num>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalRate {
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub sum_a: ChainRate,
    pub sum_b: ChainRate,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub format_version: u32,
    pub command: &'static str,
    pub r: usize,
    pub c: usize,
    pub theta: PerComponent<Num>,
    pub rho: Num,
    pub boundary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical: Option<EmpiricalRate>,
}

pub fn to_json<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
