mod common;

use common::{random_design, rel_err, summaries};
use crossmom_core::model::VarianceComponents;
use crossmom_core::pass::PatternSums;
use crossmom_core::predict::{
    blp, build_smoothing_system, build_system, shrinkage_mse, smoothing_weights, solve_weights, CellContext,
    ShrinkageWeights,
};
use crossmom_testkit::{self as tk, Design};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Context for `target` computed directly from the design.
fn context(d: &Design, target: (usize, usize)) -> CellContext {
    let ni = d.row_counts();
    let nj = d.col_counts();
    let row_n = |i: usize| if i < d.rows { ni[i] } else { 0 };
    let col_n = |j: usize| if j < d.cols { nj[j] } else { 0 };
    let t_i: usize = d.cells.iter().filter(|c| c.0 == target.0).map(|c| nj[c.1]).sum();
    let t_j: usize = d.cells.iter().filter(|c| c.1 == target.1).map(|c| ni[c.0]).sum();
    CellContext {
        n_i: row_n(target.0) as f64,
        n_j: col_n(target.1) as f64,
        z_ij: d.cells.contains(&target),
        t_i: t_i as f64,
        t_j: t_j as f64,
        n: d.n() as f64,
        sum_ni2: ni.iter().map(|&k| (k * k) as f64).sum(),
        sum_nj2: nj.iter().map(|&k| (k * k) as f64).sum(),
    }
}

/// Per-cell weights of the shrinkage predictor.
fn expand(d: &Design, w: &ShrinkageWeights, target: (usize, usize)) -> Vec<f64> {
    d.cells
        .iter()
        .map(|&(r, s)| {
            w.lambda0
                + if r == target.0 { w.lambda_a } else { 0.0 }
                + if s == target.1 { w.lambda_b } else { 0.0 }
                + if (r, s) == target { w.lambda_ab } else { 0.0 }
        })
        .collect()
}

struct Instance {
    design: Design,
    mu: f64,
    theta: VarianceComponents,
    target: (usize, usize),
}

fn instances(count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let rows = rng.random_range(2..9);
            let cols = rng.random_range(2..9);
            let p = rng.random_range(0.2..0.9);
            let design = random_design(&mut rng, rows, cols, p);
            let theta = VarianceComponents::new(
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
            )
            .unwrap();
            // Targets may fall in unseen rows or columns.
            let target = (rng.random_range(0..rows + 1), rng.random_range(0..cols + 1));
            Instance { design, mu: rng.random_range(-2.0..2.0), theta, target }
        })
        .collect()
}

#[test]
fn context_from_summaries_matches_design() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = random_design(&mut rng, 7, 6, 0.5);
    let y: Vec<f64> = (0..d.n()).map(|k| k as f64).collect();
    let (fp, sp) = summaries(&d, &y);
    let pat = PatternSums::new(&fp, &sp).unwrap();
    for &(i, j) in &[(0usize, 0usize), (3, 2), (6, 5)] {
        let row = fp.row_id(&(i as u32));
        let col = fp.col_id(&(j as u32));
        let ctx = CellContext::from_summaries(&fp, &sp, &pat, row, col, d.cells.contains(&(i, j))).unwrap();
        assert_eq!(ctx, context(&d, (i, j)));
    }
}

#[test]
fn closed_form_mse_matches_direct_error_and_is_stationary() {
    for (k, inst) in instances(200, 1).iter().enumerate() {
        let ctx = context(&inst.design, inst.target);
        let sys = build_system(inst.mu, &inst.theta, &ctx);
        let w = solve_weights(&sys, &ctx).unwrap();
        let l = shrinkage_mse(inst.mu, &inst.theta, &ctx, &w);
        let direct = tk::linear_predictor_mse(
            &inst.design,
            inst.mu,
            inst.theta.as_array(),
            &expand(&inst.design, &w, inst.target),
            inst.target,
            true,
        );
        let trivial = inst.mu * inst.mu + inst.theta.total();
        assert!(rel_err(l, direct, trivial) < 1e-9, "instance {k}: {l} vs {direct}");
        assert!(rel_err(sys.loss(&w.as_array()), l, trivial) < 1e-9);

        let lam = w.as_array();
        let mut grad = [0.0f64; 3];
        for (c, g) in grad.iter_mut().enumerate() {
            // L is quadratic, so central differences have no truncation error and a
            // wide step keeps rounding small.
            let h = 1e-2 * lam[c].abs().max(1e-2);
            let mut up = w;
            let mut dn = w;
            match c {
                0 => (up.lambda0 += h, dn.lambda0 -= h),
                1 => (up.lambda_a += h, dn.lambda_a -= h),
                _ => (up.lambda_b += h, dn.lambda_b -= h),
            };
            *g = (shrinkage_mse(inst.mu, &inst.theta, &ctx, &up) - shrinkage_mse(inst.mu, &inst.theta, &ctx, &dn))
                / (2.0 * h);
        }
        // Unseen factors have no data, so their weight is not a free direction.
        if ctx.n_i == 0.0 {
            grad[1] = 0.0;
        }
        if ctx.n_j == 0.0 {
            grad[2] = 0.0;
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if l > 1e-12 * trivial {
            assert!(gmax <= 1e-6 * l, "instance {k}: gradient {grad:?}, L = {l}");
        } else {
            // The predictor reproduces the target exactly; only rounding is left.
            assert!(gmax <= 1e-9 * trivial, "instance {k}: gradient {grad:?}, L = {l}");
        }
        if ctx.n_i == 0.0 {
            assert_eq!(w.lambda_a, 0.0);
        }
        if ctx.n_j == 0.0 {
            assert_eq!(w.lambda_b, 0.0);
        }
    }
}

#[test]
fn random_perturbations_never_improve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in instances(20, 2) {
        let ctx = context(&inst.design, inst.target);
        let w = solve_weights(&build_system(inst.mu, &inst.theta, &ctx), &ctx)
            .unwrap_or_else(|e| panic!("{e}: {ctx:?} {:?} {}", inst.theta, inst.mu));
        let best = shrinkage_mse(inst.mu, &inst.theta, &ctx, &w);
        for _ in 0..100 {
            let mut p = w;
            p.lambda0 += rng.random_range(-0.05..0.05);
            p.lambda_a += rng.random_range(-0.05..0.05);
            p.lambda_b += rng.random_range(-0.05..0.05);
            assert!(shrinkage_mse(inst.mu, &inst.theta, &ctx, &p) >= best * (1.0 - 1e-12));
        }
    }
}

#[test]
fn predictor_classes_are_ordered() {
    for (k, inst) in instances(200, 4).iter().enumerate() {
        let d = &inst.design;
        let ctx = context(d, inst.target);
        let th = inst.theta.as_array();
        let w = solve_weights(&build_system(inst.mu, &inst.theta, &ctx), &ctx).unwrap();
        let shrink_w = expand(d, &w, inst.target);
        let blp_w = blp::blp_weights_dense(inst.mu, &inst.theta, &d.cells, inst.target).unwrap();
        let trivial = inst.mu * inst.mu + inst.theta.total();

        // Stationarity of the dense weights.
        let [a, b, e] = th;
        let total: f64 = blp_w.iter().sum();
        for (x, &(r, s)) in d.cells.iter().enumerate() {
            let row: f64 = d.cells.iter().zip(&blp_w).filter(|(c, _)| c.0 == r).map(|(_, w)| w).sum();
            let col: f64 = d.cells.iter().zip(&blp_w).filter(|(c, _)| c.1 == s).map(|(_, w)| w).sum();
            let lhs = e * blp_w[x];
            let rhs = inst.mu * inst.mu * (1.0 - total)
                + a * (if r == inst.target.0 { 1.0 } else { 0.0 } - row)
                + b * (if s == inst.target.1 { 1.0 } else { 0.0 } - col);
            assert!((lhs - rhs).abs() < 1e-8 * trivial, "instance {k}: stationarity residual {}", lhs - rhs);
        }

        if ctx.z_ij {
            let mean_mse = |wts: &[f64]| tk::linear_predictor_mse(d, inst.mu, th, wts, inst.target, false);
            let blp_l = mean_mse(&blp_w);
            let sw = smoothing_weights(inst.mu, &inst.theta, &ctx).unwrap();
            let smooth_l = mean_mse(&expand(d, &sw, inst.target));
            let sys4 = build_smoothing_system(inst.mu, &inst.theta, &ctx).unwrap();
            assert!(rel_err(sys4.loss(&sw.as_array()), smooth_l, 1e-12) < 1e-9);
            assert!(
                rel_err(
                    blp::linear_mse(inst.mu, &inst.theta, &d.cells, &blp_w, inst.target, blp::Target::CellMean),
                    blp_l,
                    1e-12
                ) < 1e-9
            );
            let shrink_l = mean_mse(&shrink_w);
            assert!(blp_l <= smooth_l * (1.0 + 1e-10), "instance {k}: {blp_l} > {smooth_l}");
            assert!(smooth_l <= shrink_l * (1.0 + 1e-10), "instance {k}: {smooth_l} > {shrink_l}");
            assert!(shrinkage_mse(inst.mu, &inst.theta, &ctx, &w) <= trivial * (1.0 + 1e-10));
        } else {
            let obs_mse = |wts: &[f64]| tk::linear_predictor_mse(d, inst.mu, th, wts, inst.target, true);
            let blp_l = obs_mse(&blp_w);
            let shrink_l = shrinkage_mse(inst.mu, &inst.theta, &ctx, &w);
            assert!(
                rel_err(
                    blp::linear_mse(inst.mu, &inst.theta, &d.cells, &blp_w, inst.target, blp::Target::Observation),
                    blp_l,
                    1e-12
                ) < 1e-9
            );
            assert!(blp_l <= shrink_l * (1.0 + 1e-10), "instance {k}: {blp_l} > {shrink_l}");
            assert!(shrink_l <= trivial * (1.0 + 1e-10));
        }
    }
}

#[test]
fn new_row_and_column_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let d = random_design(&mut rng, 10, 12, 0.4);
        let ctx = context(&d, (10, 12));
        let mu = rng.random_range(0.5..2.0);
        let theta = VarianceComponents::new(2.0, 0.5, 1.0).unwrap();
        let sys = build_system(mu, &theta, &ctx);
        let w = solve_weights(&sys, &ctx).unwrap();
        let closed = mu * mu * ctx.n / sys.h[0][0];
        assert!(rel_err(w.lambda0, closed, 0.0) < 1e-10);
    }
}

#[test]
fn new_row_old_column_reduced_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = random_design(&mut rng, 10, 12, 0.4);
    let j = d.cells[0].1;
    let ctx = context(&d, (10, j));
    let theta = VarianceComponents::new(2.0, 0.5, 1.0).unwrap();
    let sys = build_system(1.3, &theta, &ctx);
    let w = solve_weights(&sys, &ctx).unwrap();
    let (h11, h13, h33) = (sys.h[0][0], sys.h[0][2], sys.h[2][2]);
    let det = h11 * h33 - h13 * h13;
    let l0 = (sys.c[0] * h33 - h13 * sys.c[2]) / det;
    let lb = (h11 * sys.c[2] - h13 * sys.c[0]) / det;
    assert!(rel_err(w.lambda0, l0, 0.0) < 1e-10);
    assert!(rel_err(w.lambda_b, lb, 0.0) < 1e-10);
    assert_eq!(w.lambda_a, 0.0);
}

#[test]
fn swapping_factors_swaps_weights() {
    let d = Design::full(6, 6);
    let ctx = context(&d, (2, 3));
    let theta = VarianceComponents::new(1.0, 1.0, 0.5).unwrap();
    let sys = build_system(0.7, &theta, &ctx);
    assert_eq!(sys.h[1][1], sys.h[2][2]);
    let w = solve_weights(&sys, &ctx).unwrap();
    assert!(rel_err(w.lambda_a, w.lambda_b, 0.0) < 1e-12);
}

#[test]
fn large_balanced_grid_uses_row_plus_column_minus_grand() {
    let n_side = 200.0;
    let ctx = CellContext {
        n_i: n_side,
        n_j: n_side,
        z_ij: true,
        t_i: n_side * n_side,
        t_j: n_side * n_side,
        n: n_side * n_side,
        sum_ni2: n_side.powi(3),
        sum_nj2: n_side.powi(3),
    };
    let theta = VarianceComponents::new(2.0, 0.5, 1.0).unwrap();
    let w = solve_weights(&build_system(1.0, &theta, &ctx), &ctx).unwrap();
    let eta = ctx.eta();
    assert!((eta - 0.005).abs() < 1e-15);
    assert!(rel_err(w.lambda0, -1.0 / ctx.n, 0.0) <= 5.0 * eta, "{}", w.lambda0 * ctx.n);
    assert!(rel_err(w.lambda_a, 1.0 / n_side, 0.0) <= 5.0 * eta);
    assert!(rel_err(w.lambda_b, 1.0 / n_side, 0.0) <= 5.0 * eta);
}

/// Each of `rows` rows observes `per_row` consecutive columns (cyclically),
/// so every column is co-observed with `per_row / cols` of the data.
fn banded(rows: usize, cols: usize, per_row: usize) -> Design {
    Design::from_mask(rows, cols, |i, j| (j + cols - i % cols) % cols < per_row)
}

#[test]
fn new_row_weights_favor_the_column() {
    let theta = VarianceComponents::new(2.0, 0.5, 1.0).unwrap();
    for &(cols, per_row, target_eta) in &[(25usize, 5usize, 0.2), (50, 5, 0.1), (100, 5, 0.05)] {
        let d = banded(200, cols, per_row);
        let ctx = context(&d, (200, 0));
        let eta = ctx.eta();
        assert!((eta - target_eta).abs() < 1e-12, "eta {eta}");
        let w = solve_weights(&build_system(1.0, &theta, &ctx), &ctx).unwrap();
        let ratio = w.lambda0 / w.lambda_b * theta.sigma2_b * ctx.n / (theta.sigma2_a + theta.sigma2_e);
        assert!((ratio - 1.0).abs() <= 5.0 * eta, "eta {eta}: ratio {ratio}");
    }
}
