#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("bad JSON ({e}):\n{}", self.stdout))
    }
}

/// Runs the command in-process.
pub fn cli<S: AsRef<str>>(args: &[S]) -> Output {
    let mut argv = vec!["crossmom".to_string()];
    argv.extend(args.iter().map(|s| s.as_ref().to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = crossmom_cli::run(argv, &mut out, &mut err);
    Output { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

pub fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, content).unwrap();
    p
}

pub fn simulate(dir: &Path, name: &str, rows: usize, cols: usize, p: f64, seed: u64, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec![
        "simulate".to_string(),
        "--rows".into(),
        rows.to_string(),
        "--cols".into(),
        cols.to_string(),
        "--observe-prob".into(),
        p.to_string(),
        "--seed".into(),
        seed.to_string(),
        "--out".into(),
        path.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let o = cli(&args);
    assert_eq!(o.code, 0, "{}", o.stderr);
    path
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Every number in `v`, paired with its JSON path, skipping timing fields.
pub fn numbers(v: &serde_json::Value, prefix: &str, out: &mut Vec<(String, f64)>) {
    match v {
        serde_json::Value::Number(n) => out.push((prefix.to_string(), n.as_f64().unwrap())),
        serde_json::Value::Array(a) => {
            for (k, x) in a.iter().enumerate() {
                numbers(x, &format!("{prefix}[{k}]"), out);
            }
        }
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                if k != "timings" {
                    numbers(x, &format!("{prefix}.{k}"), out);
                }
            }
        }
        _ => {}
    }
}
