//! Shared inputs for the benchmarks.

use crossmom_core::model::{simulate, ModelParams, SimulationSpec, Triple, VarianceComponents};

/// Gaussian triples on a `rows × cols` grid with each cell kept with probability `p`.
pub fn triples(rows: usize, cols: usize, p: f64, seed: u64) -> Vec<Triple<u32>> {
    let theta = VarianceComponents::new(2.0, 0.5, 1.0).expect("valid components");
    let spec = SimulationSpec { rows, cols, observe_prob: p, seed };
    simulate(&ModelParams::gaussian(1.0, theta), spec).expect("valid spec").collect()
}
