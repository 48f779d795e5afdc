//! End-to-end estimation from the two pass summaries.

use crate::error::{Error, Result};
use crate::model::{grand_mean, GrandMean, Key};
use crate::moments::{
    default_tol_var, moment_matrix, solve_kurtoses, solve_theta, u_stats, u_stats_refined, w_stats, MomentMatrix,
    ThetaEstimate, UStatistics, WStatistics,
};
use crate::pass::{compute_delta, FirstPassSummary, ObservationCounts, PatternSums, SecondPassSummary};
use crate::variance::{cov_uu, theta_cov_asymptotic, theta_cov_plugin, ThetaCovariance};

pub const DEFAULT_DELTA0: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    /// Balance threshold below which the asymptotic covariance is used.
    pub delta0: f64,
    /// Always report the plug-in covariance, even when the data are balanced enough.
    pub force_plugin: bool,
    /// Variance estimates at or below this have undefined kurtosis.
    /// `None` uses `1e-12` times the sample variance of all values.
    pub tol_var: Option<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { delta0: DEFAULT_DELTA0, force_plugin: false, tol_var: None }
    }
}

/// Everything computable from the first pass alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstStage {
    pub u: UStatistics,
    pub matrix: MomentMatrix,
    pub theta: ThetaEstimate,
    pub grand_mean: GrandMean,
}

pub fn first_stage<K: Key>(fp: &FirstPassSummary<K>) -> Result<FirstStage> {
    let counts = fp.count_sums()?;
    let matrix = moment_matrix(&counts);
    matrix.check()?;
    let u = u_stats(fp);
    let theta = solve_theta(&u, &matrix)?;
    let grand_mean = grand_mean(fp, &theta.clamped)?;
    Ok(FirstStage { u, matrix, theta, grand_mean })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub u: UStatistics,
    pub w: WStatistics,
    pub matrix: MomentMatrix,
    /// Variance components with fourth moments and kurtoses filled in.
    pub theta: ThetaEstimate,
    pub grand_mean: GrandMean,
    pub counts: ObservationCounts,
    pub covariance: ThetaCovariance,
}

pub fn estimate<K: Key>(fp: &FirstPassSummary<K>, sp: &SecondPassSummary, opts: &EstimateOptions) -> Result<Estimate> {
    let stage = first_stage(fp)?;
    finish_estimate(fp, sp, stage, opts)
}

pub fn finish_estimate<K: Key>(
    fp: &FirstPassSummary<K>,
    sp: &SecondPassSummary,
    stage: FirstStage,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    if !(opts.delta0 >= 0.0) {
        return Err(Error::InvalidParameter(format!("delta0 must be nonnegative, got {}", opts.delta0)));
    }
    let pattern = PatternSums::new(fp, sp)?;
    // Re-solve with the second-pass central sums so the result does not depend on sharding.
    let u = u_stats_refined(fp, sp);
    let first = solve_theta(&u, &stage.matrix)?;
    let grand_mean = grand_mean(fp, &first.clamped)?;
    let w = w_stats(fp, sp);
    let tol_var = opts.tol_var.unwrap_or_else(|| default_tol_var(fp));
    let theta = solve_kurtoses(&first, &w, &stage.matrix, &pattern.counts, tol_var)?;
    let kappa = theta.moments.expect("kurtoses solved").kappa;
    let counts = compute_delta(&pattern);
    let covariance = if !opts.force_plugin && counts.delta <= opts.delta0 {
        theta_cov_asymptotic(&theta.clamped, &kappa, &counts, opts.delta0)?
    } else {
        let ucov = cov_uu(&theta.clamped, &kappa, &pattern)?;
        theta_cov_plugin(&ucov, &stage.matrix, counts.delta, opts.delta0)?
    };
    Ok(Estimate { u, w, matrix: stage.matrix, theta, grand_mean, counts, covariance })
}
