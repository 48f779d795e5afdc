#![allow(dead_code)]

use crossmom_core::model::{EffectLaw, Triple, VarianceComponents};
use crossmom_core::pass::{first_pass, second_pass, DuplicatePolicy, FirstPassSummary, PatternSums, SecondPassSummary};
use crossmom_testkit::Design;
use rand::Rng;

pub fn triples(design: &Design, values: &[f64]) -> Vec<Triple<u32>> {
    design.cells.iter().zip(values).map(|(&(i, j), &v)| Triple::new(i as u32, j as u32, v)).collect()
}

pub fn summaries(design: &Design, values: &[f64]) -> (FirstPassSummary<u32>, SecondPassSummary) {
    let t = triples(design, values);
    let fp = first_pass(t.clone(), DuplicatePolicy::Reject).unwrap();
    let sp = second_pass(t, &fp).unwrap();
    (fp, sp)
}

pub fn pattern(design: &Design) -> PatternSums {
    let values: Vec<f64> = (0..design.n()).map(|k| k as f64).collect();
    let (fp, sp) = summaries(design, &values);
    PatternSums::new(&fp, &sp).unwrap()
}

/// Each cell kept with probability `p`; at least one cell is always kept.
pub fn random_design<R: Rng>(rng: &mut R, rows: usize, cols: usize, p: f64) -> Design {
    let mut d = Design::from_mask(rows, cols, |_, _| rng.random::<f64>() < p);
    if d.cells.is_empty() {
        d = Design::new(rows, cols, vec![(rng.random_range(0..rows), rng.random_range(0..cols))]);
    }
    d
}

/// Latent draw `(a, b, e)` laid out as in [`Design::latent_scale`].
pub fn draw_latent<R: Rng>(design: &Design, theta: &VarianceComponents, laws: [EffectLaw; 3], rng: &mut R) -> Vec<f64> {
    let mut x = Vec::with_capacity(design.dim());
    x.extend((0..design.rows).map(|_| laws[0].sample(theta.sigma2_a, rng)));
    x.extend((0..design.cols).map(|_| laws[1].sample(theta.sigma2_b, rng)));
    x.extend((0..design.n()).map(|_| laws[2].sample(theta.sigma2_e, rng)));
    x
}

pub fn rel_err(got: f64, want: f64, scale: f64) -> f64 {
    (got - want).abs() / want.abs().max(scale).max(f64::MIN_POSITIVE)
}
