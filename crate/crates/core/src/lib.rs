//! Method-of-moments estimation for crossed random effects models
//! `Y_ij = μ + a_i + b_j + e_ij` on arbitrary observation patterns.
//!
//! Data are read in two streaming passes. The first collects per-row and
//! per-column counts and central moments ([`pass::FirstPassSummary`]); the
//! second collects cross-count sums that need the first-pass counts
//! ([`pass::SecondPassSummary`]). Everything downstream is a function of
//! these summaries, whose size is `O(R + C)`.

pub mod accum;
pub mod error;
pub mod estimate;
pub mod gibbs;
pub mod model;
pub mod moments;
pub mod pass;
pub mod predict;
pub mod sidecar;
pub mod sum;
pub mod variance;

pub use error::{Component, Error, Result};
pub use estimate::{estimate, first_stage, Estimate, EstimateOptions, FirstStage, DEFAULT_DELTA0};
pub use model::{
    grand_mean, simulate, simulate_rows, EffectLaw, GrandMean, Key, Kurtoses, ModelParams, Simulation, SimulationSpec,
    Triple, VarianceComponents,
};
pub use moments::{ThetaEstimate, UStatistics, WStatistics};
pub use pass::{
    first_pass, second_pass, CountSums, DuplicatePolicy, FirstPassSummary, ObservationCounts, PatternSums, SecondPass,
    SecondPassSummary,
};
pub use predict::{CellContext, CellTotals, PredictionSystem, ShrinkageWeights};
pub use variance::{Regime, ThetaCovariance, UCovariance};
