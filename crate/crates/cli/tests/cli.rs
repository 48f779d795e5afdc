mod common;

use std::process::Command;

use common::{cli, numbers, path_str, simulate, write};
use crossmom_cli::{EXIT_DATA, EXIT_OK, EXIT_UNIDENTIFIED, EXIT_USAGE};
use tempfile::TempDir;

fn strip_timings(report: &str) -> String {
    report.lines().filter(|l| !l.contains("_ms\"")).map(|l| format!("{l}\n")).collect()
}

#[test]
fn estimate_report_matches_golden_file() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "g.csv", 30, 20, 0.4, 7, &["--mu", "1"]);
    let out = cli(&["estimate", &path_str(&data)]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let golden = include_str!("golden/estimate.json");
    assert_eq!(strip_timings(&out.stdout), golden);
    let again = cli(&["estimate", &path_str(&data)]);
    assert_eq!(strip_timings(&again.stdout), golden);
}

#[test]
fn numbers_round_trip_exactly() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "r.csv", 25, 25, 0.5, 1, &[]);
    let out = cli(&["estimate", &path_str(&data)]);
    let mut nums = Vec::new();
    numbers(&out.json(), "", &mut nums);
    let text = &out.stdout;
    for (path, v) in nums {
        if v.fract() != 0.0 || v.abs() > 1e15 {
            let printed = format!("{v:.16e}");
            assert!(text.contains(&printed), "{path}: {printed} not in report");
            assert_eq!(printed.parse::<f64>().unwrap(), v);
        }
    }
}

#[test]
fn balanced_simulation_recovers_components() {
    let dir = TempDir::new().unwrap();
    let truth = [2.0, 0.5, 1.0];
    let mut draws: Vec<[f64; 3]> = Vec::new();
    let mut last = None;
    for seed in 0..30 {
        let data = simulate(dir.path(), "b.csv", 100, 100, 1.0, seed, &["--mu", "1"]);
        let out = cli(&["estimate", &path_str(&data)]);
        assert_eq!(out.code, EXIT_OK);
        let v = out.json();
        let raw = &v["theta"]["raw"];
        draws.push(["a", "b", "e"].map(|k| raw[k].as_f64().unwrap()));
        last = Some(v);
    }
    let v = last.unwrap();
    for k in 0..3 {
        let mean = draws.iter().map(|d| d[k]).sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        assert!(
            (draws[29][k] - truth[k]).abs() <= 5.0 * sd,
            "component {k}: {} vs {} (sd {sd})",
            draws[29][k],
            truth[k]
        );
    }
    let delta = v["counts"]["delta"].as_f64().unwrap();
    let regime = v["covariance"]["regime"].as_str().unwrap();
    assert_eq!(regime, if delta <= 0.01 { "asymptotic" } else { "plugin_upper" });
}

#[test]
fn iid_pattern_is_unidentified_with_partial_report() {
    let dir = TempDir::new().unwrap();
    let body: String = (0..20).map(|k| format!("r{k},c{k},{}\n", k as f64 * 0.5)).collect();
    let data = write(dir.path(), "iid.csv", &format!("row,col,value\n{body}"));
    let out = cli(&["estimate", &path_str(&data)]);
    assert_eq!(out.code, EXIT_UNIDENTIFIED);
    assert!(out.stderr.contains("sigma2_a") && out.stderr.contains("sigma2_b"), "{}", out.stderr);
    let v = out.json();
    assert_eq!(v["status"], "unidentified");
    assert_eq!(v["error"]["unidentified"], serde_json::json!(["sigma2_a", "sigma2_b"]));
    assert_eq!(v["counts"]["n"], 20);
    assert!(v.get("theta").is_none());

    let out = cli(&["predict", &path_str(&data), "--cell", "r1,c2"]);
    assert_eq!(out.code, EXIT_UNIDENTIFIED);
    assert_eq!(out.json()["status"], "unidentified");
    let out = cli(&["predict", &path_str(&data), "--cell", "r1,c2", "--theta", "1,1,1"]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
}

#[test]
fn data_errors_exit_one_with_line_numbers() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("nan.csv", "row,col,value\na,x,1\nb,y,NaN\n", "line 3"),
        ("inf.csv", "row,col,value\na,x,1\nb,y,2\nc,z,inf\n", "line 4"),
        ("text.csv", "row,col,value\na,x,one\n", "line 2"),
        ("fields.csv", "row,col,value\na,x,1\nb,y\n", "line 3"),
        ("dup.csv", "row,col,value\na,x,1\nb,x,2\na,x,3\n", "line 4"),
        ("header.csv", "r,c,v\na,x,1\n", "line 1"),
        ("empty.csv", "", "line 1"),
        ("only_header.csv", "row,col,value\n", "no observations"),
    ];
    for (name, content, needle) in cases {
        let p = write(dir.path(), name, content);
        for shards in ["1", "3"] {
            let out = cli(&["estimate", &path_str(&p), "--shards", shards]);
            assert_eq!(out.code, EXIT_DATA, "{name}: {}", out.stderr);
            assert!(out.stderr.contains(needle), "{name} (shards {shards}): {}", out.stderr);
            assert!(out.stdout.is_empty());
        }
    }
    let missing = dir.path().join("missing.csv");
    assert_eq!(cli(&["estimate", &path_str(&missing)]).code, EXIT_DATA);
    let ok = write(dir.path(), "ok.csv", "row,col,value\na,x,1\na,y,2\nb,x,3\nb,y,5\nc,y,1\n");
    let bad_cells = write(dir.path(), "cells.csv", "r,c\na,x\n");
    assert_eq!(cli(&["predict", &path_str(&ok), "--cells", &path_str(&bad_cells)]).code, EXIT_DATA);
    let out_dir = dir.path().join("no/such/dir/report.json");
    assert_eq!(cli(&["estimate", &path_str(&ok), "--out", &path_str(&out_dir)]).code, EXIT_DATA);
}

#[test]
fn flag_errors_exit_three() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "f.csv", 10, 10, 0.5, 2, &[]);
    let d = path_str(&data);
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["frobnicate"],
        vec!["estimate"],
        vec!["estimate", &d, "--bogus"],
        vec!["estimate", &d, "--delta0", "-1"],
        vec!["estimate", &d, "--delta0", "abc"],
        vec!["estimate", &d, "--shards", "0"],
        vec!["estimate", &d, "--dedupe", "--assume-unique"],
        vec!["estimate", &d, "--pass1-only", "--two-pass-only"],
        vec!["predict", &d],
        vec!["predict", &d, "--cell", "nocomma"],
        vec!["predict", &d, "--cell", "1,1", "--theta", "1,2"],
        vec!["predict", &d, "--cell", "1,1", "--theta", "1,-2,3"],
        vec!["predict", &d, "--cell", "1,1", "--mu", "inf"],
        vec!["simulate", "--rows", "5"],
        vec!["simulate", "--rows", "5", "--cols", "5", "--observe-prob", "0"],
        vec!["simulate", "--rows", "0", "--cols", "5"],
        vec!["simulate", "--rows", "5", "--cols", "5", "--laws", "normal,cauchy,normal"],
        vec!["gibbs-rate", "--r", "5", "--c", "5"],
        vec!["gibbs-rate", "--r", "5", "--c", "5", "--theta", "0,0,0"],
        vec!["gibbs-rate", "--r", "0", "--c", "5", "--theta", "1,1,1"],
        vec!["gibbs-rate", "--r", "5", "--c", "5", "--theta", "1,1,1", "--iters", "10"],
        vec!["gibbs-rate", "--r", "5", "--c", "5", "--theta", "1,1,1", "--empirical", "--iters", "3000"],
        vec!["gibbs-rate", "--r", "5", "--c", "5", "--theta", "0,1,1", "--empirical"],
    ];
    for args in cases {
        let out = cli(&args);
        assert_eq!(out.code, EXIT_USAGE, "{args:?}: {}", out.stderr);
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    assert_eq!(cli(&["--help"]).code, EXIT_OK);
    assert_eq!(cli(&["estimate", "--help"]).code, EXIT_OK);
    assert_eq!(cli(&["--version"]).code, EXIT_OK);
}

#[test]
fn binary_exit_codes_and_thread_cap() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "t.csv", 20, 20, 0.5, 3, &[]);
    let run = |env: Option<&str>, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_crossmom"));
        cmd.args(args).env_remove("CM_THREADS");
        if let Some(v) = env {
            cmd.env("CM_THREADS", v);
        }
        cmd.output().unwrap()
    };
    let d = path_str(&data);
    let base = run(None, &["estimate", &d, "--shards", "4"]);
    assert_eq!(base.status.code(), Some(EXIT_OK));
    let capped = run(Some("1"), &["estimate", &d, "--shards", "4"]);
    assert_eq!(capped.status.code(), Some(EXIT_OK));
    assert_eq!(
        strip_timings(&String::from_utf8_lossy(&base.stdout)),
        strip_timings(&String::from_utf8_lossy(&capped.stdout))
    );
    for bad in ["0", "many", "-2"] {
        assert_eq!(run(Some(bad), &["estimate", &d]).status.code(), Some(EXIT_USAGE), "CM_THREADS={bad}");
    }
    assert_eq!(run(None, &["estimate", "/nonexistent/x.csv"]).status.code(), Some(EXIT_DATA));
    assert_eq!(run(None, &["estimate", &d, "--nope"]).status.code(), Some(EXIT_USAGE));
    let iid = write(dir.path(), "iid.csv", "row,col,value\na,x,1\nb,y,2\nc,z,4\n");
    assert_eq!(run(None, &["estimate", &path_str(&iid)]).status.code(), Some(EXIT_UNIDENTIFIED));
}

#[test]
fn shards_and_two_job_split_agree() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "s.csv", 60, 50, 0.3, 11, &["--mu", "2"]);
    let d = path_str(&data);
    let collect = |args: &[&str]| {
        let out = cli(args);
        assert_eq!(out.code, EXIT_OK, "{args:?}: {}", out.stderr);
        let mut v = Vec::new();
        numbers(&out.json(), "", &mut v);
        v
    };
    let base = collect(&["estimate", &d, "--seed-check"]);
    let side = path_str(&dir.path().join("pass1.csv"));
    let first = cli(&["estimate", &d, "--pass1-only", "--seed-check", "--summaries-out", &side]);
    assert_eq!(first.code, EXIT_OK);
    assert_eq!(first.json()["status"], "pass1");
    let split = collect(&["estimate", &d, "--seed-check", "--summaries-in", &side]);
    assert_eq!(base.len(), split.len());
    for ((p, a), (_, b)) in base.iter().zip(&split) {
        assert_eq!(a, b, "{p}");
    }
    for shards in ["2", "5", "16"] {
        let other = collect(&["estimate", &d, "--seed-check", "--shards", shards]);
        for ((p, a), (q, b)) in base.iter().zip(&other) {
            assert_eq!(p, q);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()), "{shards} shards, {p}: {a} vs {b}");
        }
    }
    // A sidecar from different data is caught by the content digest.
    let other = simulate(dir.path(), "o.csv", 60, 50, 0.3, 12, &[]);
    let out = cli(&["estimate", &path_str(&other), "--seed-check", "--summaries-in", &side]);
    assert_eq!(out.code, EXIT_DATA, "{}", out.stderr);
    let plain = path_str(&dir.path().join("plain.csv"));
    assert_eq!(cli(&["estimate", &d, "--pass1-only", "--summaries-out", &plain]).code, EXIT_OK);
    assert_eq!(cli(&["estimate", &d, "--seed-check", "--summaries-in", &plain]).code, EXIT_DATA);
}

#[test]
fn duplicate_policies() {
    let dir = TempDir::new().unwrap();
    let dup = write(dir.path(), "d.csv", "row,col,value\na,x,1\na,y,2\nb,x,3\nb,y,4\nc,x,0\nc,y,9\na,x,3\n");
    assert_eq!(cli(&["estimate", &path_str(&dup)]).code, EXIT_DATA);
    let avg = cli(&["estimate", &path_str(&dup), "--dedupe"]);
    assert_eq!(avg.code, EXIT_OK, "{}", avg.stderr);
    let v = avg.json();
    assert_eq!(v["counts"]["n"], 6);
    assert_eq!(v["counts"]["raw_count"], 7);
    let merged = write(dir.path(), "m.csv", "row,col,value\na,x,2\na,y,2\nb,x,3\nb,y,4\nc,x,0\nc,y,9\n");
    let plain = cli(&["estimate", &path_str(&merged)]).json();
    assert_eq!(v["theta"], plain["theta"]);
    let trusted = cli(&["estimate", &path_str(&merged), "--assume-unique"]).json();
    assert_eq!(trusted["theta"], plain["theta"]);
}

#[test]
fn predict_examples() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "p.csv", 40, 30, 0.3, 5, &["--mu", "1"]);
    let d = path_str(&data);
    let out = cli(&["predict", &d, "--cell", "new_row,new_col"]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let v = out.json();
    let cell = &v["cells"][0];
    assert_eq!(cell["row_seen"], false);
    let w = &cell["weights"];
    assert_eq!(w["lambda_a"].as_f64(), Some(0.0));
    assert_eq!(w["lambda_b"].as_f64(), Some(0.0));
    let est = cli(&["estimate", &d]).json();
    let n = est["counts"]["n"].as_f64().unwrap();
    let grand = est["grand_mean"]["mu_hat"].as_f64().unwrap() * n;
    let y = cell["y_hat"].as_f64().unwrap();
    assert!((y - w["lambda0"].as_f64().unwrap() * grand).abs() <= 1e-12 * y.abs().max(1e-300));

    // First observed cell of the file, predicted with and without smoothing.
    let text = std::fs::read_to_string(&data).unwrap();
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let target = format!("{},{}", first[0], first[1]);
    let smooth = cli(&["predict", &d, "--cell", &target, "--smooth"]).json();
    let c = &smooth["cells"][0];
    assert_eq!(c["observed"], true);
    assert_eq!(c["target"], "cell_mean");
    assert_eq!(c["value"].as_f64().unwrap(), first[2].parse::<f64>().unwrap());
    let lab = c["weights"]["lambda_ab"].as_f64().unwrap();
    assert!(lab > 0.0 && lab < 1.0, "{lab}");
    let plain = cli(&["predict", &d, "--cell", &target]).json();
    assert_eq!(plain["cells"][0]["target"], "observation");
    assert_eq!(plain["cells"][0]["weights"]["lambda_ab"].as_f64(), Some(0.0));

    let cells = write(dir.path(), "cells.csv", "row,col\n0,0\n3,7\nzz,1\n");
    let batch =
        cli(&["predict", &d, "--cells", &path_str(&cells), "--cell", "0,0", "--mu", "-0.5", "--theta", "1,1,1"]);
    assert_eq!(batch.code, EXIT_OK, "{}", batch.stderr);
    let b = batch.json();
    assert_eq!(b["cells"].as_array().unwrap().len(), 4);
    assert_eq!(b["mu"].as_f64(), Some(-0.5));
    assert_eq!(b["theta_source"], "flag");
    assert_eq!(b["cells"][0]["y_hat"], b["cells"][1]["y_hat"]);
}

#[test]
fn predict_batch_cost_is_per_cell_cheap() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "big.csv", 400, 400, 0.5, 8, &[]);
    let d = path_str(&data);
    let mut lines = String::from("row,col\n");
    for k in 0..1000 {
        lines.push_str(&format!("{},{}\n", k % 450, (k * 7) % 420));
    }
    let cells = write(dir.path(), "cells.csv", &lines);
    let time = |v: &serde_json::Value, k: &str| v["timings"][k].as_f64().unwrap();
    let one = cli(&["predict", &d, "--cell", "0,0"]).json();
    let many = cli(&["predict", &d, "--cells", &path_str(&cells)]).json();
    assert_eq!(many["cells"].as_array().unwrap().len(), 1000);
    let pass = |v: &serde_json::Value| time(v, "pass1_ms") + time(v, "pass2_ms");
    assert!(pass(&many) <= 2.0 * pass(&one) + 100.0, "{} vs {}", pass(&many), pass(&one));
    assert!(time(&many, "solve_ms") / 1000.0 < 1.0, "{} ms for 1000 cells", time(&many, "solve_ms"));
}

#[test]
fn simulate_examples() {
    let dir = TempDir::new().unwrap();
    let a = simulate(dir.path(), "a.csv", 30, 30, 0.5, 42, &[]);
    let a = std::fs::read(&a).unwrap();
    let b = simulate(dir.path(), "b.csv", 30, 30, 0.5, 42, &[]);
    assert_eq!(a, std::fs::read(&b).unwrap());
    let c = simulate(dir.path(), "c.csv", 30, 30, 0.5, 43, &[]);
    assert_ne!(a, std::fs::read(&c).unwrap());
    let z = simulate(dir.path(), "z.csv", 10, 12, 0.7, 1, &["--theta", "0,0,0", "--mu", "3.5"]);
    let text = std::fs::read_to_string(z).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",3.5")));
    let full = simulate(dir.path(), "f.csv", 20, 15, 1.0, 1, &["--laws", "uniform,exponential,normal"]);
    assert_eq!(std::fs::read_to_string(full).unwrap().lines().count(), 1 + 300);
    let stdout = cli(&["simulate", "--rows", "3", "--cols", "3", "--observe-prob", "1"]);
    assert_eq!(stdout.code, EXIT_OK);
    assert!(stdout.stdout.starts_with("row,col,value\n0,0,"));
}

#[test]
fn gibbs_rate_examples() {
    let v = cli(&["gibbs-rate", "--r", "1000", "--c", "1000", "--theta", "2,0.5,1"]).json();
    let rho = v["rho"].as_f64().unwrap();
    assert!((rho - 1e6 / (2001.0 * 501.0)).abs() < 1e-12);
    assert!((rho - 0.997506).abs() < 1e-6);
    assert_eq!(v["boundary"], false);
    let zero = cli(&["gibbs-rate", "--r", "10", "--c", "10", "--theta", "0,0.5,1"]).json();
    assert_eq!(zero["rho"].as_f64(), Some(0.0));
    let edge = cli(&["gibbs-rate", "--r", "10", "--c", "10", "--theta", "1,0.5,0"]).json();
    assert_eq!(edge["rho"].as_f64(), Some(1.0));
    assert_eq!(edge["boundary"], true);
    let emp = cli(&["gibbs-rate", "--r", "20", "--c", "20", "--theta", "2,0.5,1", "--empirical", "--iters", "51000"]);
    assert_eq!(emp.code, EXIT_OK, "{}", emp.stderr);
    let e = emp.json();
    for f in ["sum_a", "sum_b"] {
        let r = e["empirical"][f]["rho_empirical"].as_f64().unwrap();
        assert!((r - 400.0 / 451.0).abs() <= 0.03, "{f}: {r}");
        assert_eq!(e["empirical"][f]["acf"][0].as_f64(), Some(1.0));
    }
}
