use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::time::Instant;

use crossmom_core::estimate::{finish_estimate, first_stage, EstimateOptions};
use crossmom_core::gibbs::{empirical_rate, gibbs_rate, run_gibbs_phi, BalancedData, Functional, GibbsConfig};
use crossmom_core::model::{
    grand_mean, simulate as simulate_triples, GrandMean, ModelParams, SimulationSpec, VarianceComponents,
};
use crossmom_core::moments::{u_stats, ThetaEstimate};
use crossmom_core::pass::{DuplicatePolicy, FirstPassSummary, ObservationCounts, PatternSums};
use crossmom_core::predict::{
    build_smoothing_system, build_system, predict as predict_cell, shrinkage_mse, smoothing_weights, solve_weights,
    CellContext, CellTotals, ShrinkageWeights,
};
use crossmom_core::sidecar::{read_summary, write_summary};
use crossmom_core::Error;
use rayon::ThreadPool;

use crate::input::{self, Source, Targets};
use crate::report::{self, nums, Num, PerComponent};
use crate::{CliError, Command, EstimateArgs, GibbsArgs, PassArgs, PredictArgs, SimulateArgs, EXIT_UNIDENTIFIED};

/// Runs one command. Returns the report text, or `None` when the command
/// wrote its own output.
pub fn execute(
    command: Command,
    thread_cap: Option<usize>,
    stdout: &mut dyn Write,
) -> Result<Option<String>, CliError> {
    match command {
        Command::Estimate(a) => estimate(&a, thread_cap).map(Some),
        Command::Predict(a) => predict(&a, thread_cap).map(Some),
        Command::Simulate(a) => simulate(&a, stdout).map(|()| None),
        Command::GibbsRate(a) => rate(&a).map(Some),
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn pool(shards: u32, cap: Option<usize>) -> Result<ThreadPool, CliError> {
    let workers = cap.map_or(shards as usize, |c| c.min(shards as usize)).max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::data(format!("thread pool: {e}")))
}

fn policy(p: &PassArgs) -> DuplicatePolicy {
    if p.dedupe {
        DuplicatePolicy::Average
    } else if p.assume_unique || p.summaries_in.is_some() {
        DuplicatePolicy::Trust
    } else {
        DuplicatePolicy::Reject
    }
}

struct PassOne {
    src: Source,
    ranges: Vec<Range<u64>>,
    fp: FirstPassSummary<String>,
    ms: f64,
}

fn pass_one(p: &PassArgs, pool: &ThreadPool) -> Result<PassOne, CliError> {
    let src = Source::open(&p.input)?;
    let ranges = src.shards(p.shards as usize)?;
    let t = Instant::now();
    let fp = match &p.summaries_in {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::io(path, e))?;
            let fp: FirstPassSummary<String> =
                read_summary(BufReader::new(file)).map_err(|e| CliError::core(path, e))?;
            if p.seed_check && fp.fingerprint().is_none() {
                return Err(CliError::data(format!(
                    "{}: sidecar has no content digest; write it with --seed-check",
                    path.display()
                )));
            }
            fp
        }
        None => pool.install(|| input::first_pass(&src, &ranges, policy(p), p.seed_check))?,
    };
    if let Some(path) = &p.summaries_out {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        write_summary(&fp, BufWriter::new(file)).map_err(|e| CliError::core(path, e))?;
    }
    Ok(PassOne { src, ranges, fp, ms: elapsed_ms(t) })
}

fn counts(
    fp: &FirstPassSummary<String>,
    obs: Option<&ObservationCounts>,
    delta0: f64,
) -> Result<report::Counts, CliError> {
    let cs = fp.count_sums().map_err(CliError::from_core)?;
    let n = cs.n as f64;
    Ok(report::Counts {
        n: cs.n,
        r: cs.r,
        c: cs.c,
        raw_count: fp.raw_count(),
        eps_r: Num(cs.max_ni as f64 / n),
        eps_c: Num(cs.max_nj as f64 / n),
        delta: obs.map(|o| Num(o.delta)),
        delta0: Num(delta0),
        ratios: obs.map(|o| report::Ratios {
            eps_r: Num(o.eps_r),
            eps_c: Num(o.eps_c),
            r_over_n: Num(o.r_over_n),
            c_over_n: Num(o.c_over_n),
            n_over_sum_ni2: Num(o.n_over_sum_ni2),
            n_over_sum_nj2: Num(o.n_over_sum_nj2),
            zn_mp_over_sum_ni2: Num(o.zn_mp_over_sum_ni2),
            zn_pm_over_sum_nj2: Num(o.zn_pm_over_sum_nj2),
        }),
    })
}

fn unidentified_report(e: &Error) -> report::ErrorReport {
    let unidentified = match e {
        Error::SingularSystem { unidentified, .. } => unidentified.iter().map(|c| c.to_string()).collect(),
        _ => Vec::new(),
    };
    report::ErrorReport { message: e.to_string(), unidentified }
}

fn stage_parts(g: &GrandMean, theta: &ThetaEstimate) -> (report::GrandMean, report::Theta) {
    (
        report::GrandMean { mu_hat: Num(g.mu_hat), variance: Num(g.variance), eps_bound: Num(g.eps_bound) },
        report::Theta { raw: nums(theta.sigma2), clamped: nums(theta.clamped.as_array()) },
    )
}

fn estimate(a: &EstimateArgs, cap: Option<usize>) -> Result<String, CliError> {
    if !(a.delta0.is_finite() && a.delta0 >= 0.0) {
        return Err(CliError::usage(format!("--delta0 must be finite and nonnegative, got {}", a.delta0)));
    }
    let pool = pool(a.pass.shards, cap)?;
    let one = pass_one(&a.pass, &pool)?;
    let fp = &one.fp;
    let t = Instant::now();
    let stage = first_stage(fp);
    let mut solve_ms = elapsed_ms(t);
    let base = |status, error, solve_ms| -> Result<report::EstimateReport, CliError> {
        Ok(report::EstimateReport {
            format_version: report::FORMAT_VERSION,
            command: "estimate",
            status,
            counts: counts(fp, None, a.delta0)?,
            statistics: report::Statistics { u: nums(u_stats(fp).as_array()), w: None },
            grand_mean: None,
            theta: None,
            kappa: None,
            covariance: None,
            error,
            timings: report::Timings { pass1_ms: Num(one.ms), pass2_ms: Num(0.0), solve_ms: Num(solve_ms) },
        })
    };
    let stage = match stage {
        Ok(s) => s,
        Err(e @ Error::SingularSystem { .. }) => {
            let partial = base("unidentified", Some(unidentified_report(&e)), solve_ms)?;
            return Err(CliError {
                code: EXIT_UNIDENTIFIED,
                message: e.to_string(),
                partial: Some(report::to_json(&partial)),
            });
        }
        Err(e) => return Err(CliError::core(one.src.path(), e)),
    };
    if a.pass1_only {
        let mut r = base("pass1", None, solve_ms)?;
        let (g, th) = stage_parts(&stage.grand_mean, &stage.theta);
        r.grand_mean = Some(g);
        r.theta = Some(th);
        return Ok(report::to_json(&r));
    }

    let t = Instant::now();
    let (sp, _) = pool.install(|| input::second_pass(&one.src, &one.ranges, fp, &Targets::default()))?;
    let pass2_ms = elapsed_ms(t);

    let t = Instant::now();
    let opts = EstimateOptions { delta0: a.delta0, force_plugin: a.two_pass_only, tol_var: None };
    let est = finish_estimate(fp, &sp, stage, &opts).map_err(|e| CliError::core(one.src.path(), e))?;
    solve_ms += elapsed_ms(t);

    let m = est.theta.moments.expect("kurtoses are filled in by the second stage");
    let cov = &est.covariance;
    let mut r = base("ok", None, solve_ms)?;
    r.counts = counts(fp, Some(&est.counts), a.delta0)?;
    r.statistics.u = nums(est.u.as_array());
    r.statistics.w = Some(nums(est.w.as_array()));
    let (g, th) = stage_parts(&est.grand_mean, &est.theta);
    r.grand_mean = Some(g);
    r.theta = Some(th);
    r.kappa = Some(report::Kappa {
        mu4: nums(m.mu4),
        raw: PerComponent::from_array(m.kappa_raw.map(|k| k.map(Num))),
        used: nums(m.kappa.as_array()),
        floored: PerComponent::from_array(m.floored),
    });
    r.covariance = Some(report::Covariance {
        regime: cov.regime.as_str(),
        matrix: report::matrix(cov.matrix),
        standard_errors: nums(cov.diagonal().map(|v| v.max(0.0).sqrt())),
        non_conservative: cov.non_conservative,
    });
    r.timings.pass2_ms = Num(pass2_ms);
    Ok(report::to_json(&r))
}

struct Request {
    row: String,
    col: String,
    row_id: Option<usize>,
    col_id: Option<usize>,
    slot: Option<usize>,
}

fn predict(a: &PredictArgs, cap: Option<usize>) -> Result<String, CliError> {
    if let Some(mu) = a.mu {
        if !mu.is_finite() {
            return Err(CliError::usage("--mu must be finite"));
        }
    }
    let mut cells = a.cell.clone();
    if let Some(path) = &a.cells {
        cells.extend(input::read_cells(path)?);
    }
    let pool = pool(a.pass.shards, cap)?;
    let one = pass_one(&a.pass, &pool)?;
    let fp = &one.fp;
    let path = one.src.path();
    let mut out = report::PredictReport {
        format_version: report::FORMAT_VERSION,
        command: "predict",
        status: "ok",
        n: fp.n(),
        r: fp.r() as u64,
        c: fp.c() as u64,
        mu: None,
        mu_source: None,
        theta: None,
        theta_source: None,
        cells: Vec::new(),
        error: None,
        timings: report::Timings { pass1_ms: Num(one.ms), pass2_ms: Num(0.0), solve_ms: Num(0.0) },
    };

    let t = Instant::now();
    let (theta, theta_source, mu_hat) = match a.theta {
        Some(th) => {
            let theta = VarianceComponents::from_array(th);
            let g = grand_mean(fp, &theta).map_err(|e| CliError::core(path, e))?;
            (theta, "flag", g.mu_hat)
        }
        None => match first_stage(fp) {
            Ok(s) => (s.theta.clamped, "estimate", s.grand_mean.mu_hat),
            Err(e @ Error::SingularSystem { .. }) => {
                out.status = "unidentified";
                out.error = Some(unidentified_report(&e));
                return Err(CliError {
                    code: EXIT_UNIDENTIFIED,
                    message: format!("{e}; pass --theta to predict anyway"),
                    partial: Some(report::to_json(&out)),
                });
            }
            Err(e) => return Err(CliError::core(path, e)),
        },
    };
    let (mu, mu_source) = match a.mu {
        Some(m) => (m, "flag"),
        None => (mu_hat, "estimate"),
    };
    out.mu = Some(Num(mu));
    out.mu_source = Some(mu_source);
    out.theta = Some(nums(theta.as_array()));
    out.theta_source = Some(theta_source);
    let mut solve_ms = elapsed_ms(t);

    let mut targets = Targets::default();
    let requests: Vec<Request> = cells
        .into_iter()
        .map(|(row, col)| {
            let row_id = fp.row_id(row.as_str());
            let col_id = fp.col_id(col.as_str());
            let slot = match (row_id, col_id) {
                (Some(i), Some(j)) => Some(targets.add(i, j)),
                _ => None,
            };
            Request { row, col, row_id, col_id, slot }
        })
        .collect();

    let t = Instant::now();
    let (sp, captured) = pool.install(|| input::second_pass(&one.src, &one.ranges, fp, &targets))?;
    out.timings.pass2_ms = Num(elapsed_ms(t));

    let t = Instant::now();
    let pattern = PatternSums::new(fp, &sp).map_err(|e| CliError::core(path, e))?;
    let mut failed = 0usize;
    for req in requests {
        let value = req.slot.map(|s| captured[s]).filter(|c| c.0 > 0).map(|(k, sum)| sum / k as f64);
        let observed = value.is_some();
        let ctx = CellContext::from_summaries(fp, &sp, &pattern, req.row_id, req.col_id, observed)
            .map_err(|e| CliError::core(path, e))?;
        let smoothing = a.smooth && observed;
        let solved: crossmom_core::Result<(ShrinkageWeights, f64)> = if smoothing {
            smoothing_weights(mu, &theta, &ctx).and_then(|w| {
                let sys = build_smoothing_system(mu, &theta, &ctx)?;
                Ok((w, sys.loss(&w.as_array())))
            })
        } else {
            solve_weights(&build_system(mu, &theta, &ctx), &ctx).map(|w| (w, shrinkage_mse(mu, &theta, &ctx, &w)))
        };
        let mut rec = report::CellPrediction {
            row: req.row,
            col: req.col,
            row_seen: req.row_id.is_some(),
            col_seen: req.col_id.is_some(),
            observed,
            value: value.map(Num),
            target: if smoothing { "cell_mean" } else { "observation" },
            weights: None,
            eta: Num(ctx.eta()),
            y_hat: None,
            mse: None,
            error: None,
        };
        match solved {
            Ok((w, mse)) => {
                let totals = CellTotals::from_summary(fp, req.row_id, req.col_id, if smoothing { value } else { None });
                rec.y_hat = Some(Num(predict_cell(&w, &totals)));
                rec.mse = Some(Num(mse));
                rec.weights = Some(report::Weights {
                    lambda0: Num(w.lambda0),
                    lambda_a: Num(w.lambda_a),
                    lambda_b: Num(w.lambda_b),
                    lambda_ab: Num(w.lambda_ab),
                });
            }
            Err(e) if crate::exit_code(&e) == EXIT_UNIDENTIFIED => {
                failed += 1;
                rec.error = Some(e.to_string());
            }
            Err(e) => return Err(CliError::core(path, e)),
        }
        out.cells.push(rec);
    }
    solve_ms += elapsed_ms(t);
    out.timings.solve_ms = Num(solve_ms);
    if failed > 0 {
        out.status = "partial";
        return Err(CliError {
            code: EXIT_UNIDENTIFIED,
            message: format!("{failed} cell(s) have a singular prediction system"),
            partial: Some(report::to_json(&out)),
        });
    }
    Ok(report::to_json(&out))
}

fn simulate(a: &SimulateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let params = ModelParams::with_laws(a.mu, VarianceComponents::from_array(a.theta), a.laws);
    let spec = SimulationSpec { rows: a.rows, cols: a.cols, observe_prob: a.observe_prob, seed: a.seed };
    let sim = simulate_triples(&params, spec).map_err(CliError::from_core)?;
    let write_all = |w: &mut dyn Write| -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "row,col,value")?;
        for t in sim {
            writeln!(w, "{},{},{}", t.row, t.col, t.value)?;
        }
        w.flush()
    };
    match &a.out {
        Some(path) => {
            let mut file = File::create(path).map_err(|e| CliError::io(path, e))?;
            write_all(&mut file).map_err(|e| CliError::io(path, e))
        }
        None => write_all(stdout).map_err(|e| CliError::data(format!("stdout: {e}"))),
    }
}

fn rate(a: &GibbsArgs) -> Result<String, CliError> {
    let theta = VarianceComponents::from_array(a.theta);
    let g = gibbs_rate(a.r, a.c, &theta).map_err(CliError::from_core)?;
    let empirical = if a.empirical {
        let spec = SimulationSpec { rows: a.r, cols: a.c, observe_prob: 1.0, seed: a.seed };
        let sim = simulate_triples(&ModelParams::gaussian(a.mu, theta), spec).map_err(CliError::from_core)?;
        let data = BalancedData::from_triples(sim).map_err(CliError::from_core)?;
        let cfg = GibbsConfig {
            r: a.r,
            c: a.c,
            mu: a.mu,
            theta,
            iterations: a.iters,
            burn_in: a.burn_in,
            seed: a.seed.wrapping_add(1),
        };
        let chain = run_gibbs_phi(&cfg, &data).map_err(CliError::from_core)?;
        let fit = |f| -> Result<report::ChainRate, CliError> {
            let rep = empirical_rate(&chain, f, &theta).map_err(CliError::from_core)?;
            Ok(report::ChainRate { rho_empirical: Num(rep.rho_empirical), acf: rep.acf.into_iter().map(Num).collect() })
        };
        Some(report::EmpiricalRate {
            iterations: a.iters,
            burn_in: a.burn_in,
            seed: a.seed,
            sum_a: fit(Functional::SumA)?,
            sum_b: fit(Functional::SumB)?,
        })
    } else {
        None
    };
    Ok(report::to_json(&report::RateReport {
        format_version: report::FORMAT_VERSION,
        command: "gibbs-rate",
        r: a.r,
        c: a.c,
        theta: nums(a.theta),
        rho: Num(g.rho),
        boundary: g.boundary,
        empirical,
    }))
}
