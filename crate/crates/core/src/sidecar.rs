//! CSV sidecar for first-pass summaries, so the two passes can run as separate jobs.
//!
//! Layout (one record per line, `flexible` CSV):
//!
//! ```text
//! crossmom-summary,1
//! counts,N,R,C,raw_count,fingerprint_count,fingerprint_digest
//! global,,n,mean,m2,m3,m4
//! row,<key>,n,mean,m2,m3,m4      (R lines, first-seen order)
//! col,<key>,n,mean,m2,m3,m4      (C lines)
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a write/read cycle is lossless.

use std::io::{Read, Write};
use std::str::FromStr;

use crate::accum::GroupAccumulator;
use crate::error::{Error, Result};
use crate::model::Key;
use crate::pass::{Fingerprint, FirstPassSummary};

pub const FORMAT_NAME: &str = "crossmom-summary";
pub const FORMAT_VERSION: u32 = 1;

fn acc_fields(acc: &GroupAccumulator) -> [String; 5] {
    [acc.n.to_string(), acc.mean.to_string(), acc.m2.to_string(), acc.m3.to_string(), acc.m4.to_string()]
}

fn csv_err(e: csv::Error) -> Error {
    Error::Sidecar(e.to_string())
}

pub fn write_summary<K: Key, W: Write>(fp: &FirstPassSummary<K>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record([FORMAT_NAME, &FORMAT_VERSION.to_string()]).map_err(csv_err)?;
    let (fc, fd) = match fp.fingerprint() {
        Some(f) => (f.count.to_string(), f.digest.to_string()),
        None => (String::new(), String::new()),
    };
    w.write_record([
        "counts".to_string(),
        fp.n().to_string(),
        fp.r().to_string(),
        fp.c().to_string(),
        fp.raw_count().to_string(),
        fc,
        fd,
    ])
    .map_err(csv_err)?;
    let mut rec = |kind: &str, key: String, acc: &GroupAccumulator| -> Result<()> {
        let f = acc_fields(acc);
        w.write_record([kind, key.as_str(), &f[0], &f[1], &f[2], &f[3], &f[4]]).map_err(csv_err)
    };
    rec("global", String::new(), &fp.global)?;
    for (k, acc) in fp.row_keys().keys().iter().zip(fp.rows()) {
        rec("row", k.to_string(), acc)?;
    }
    for (k, acc) in fp.col_keys().keys().iter().zip(fp.cols()) {
        rec("col", k.to_string(), acc)?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Sidecar(format!("line {line}: missing field {idx}")))?;
    raw.parse().map_err(|_| Error::Sidecar(format!("line {line}: cannot parse field {idx} ('{raw}')")))
}

fn read_acc(rec: &csv::StringRecord, line: u64) -> Result<GroupAccumulator> {
    Ok(GroupAccumulator {
        n: field(rec, 2, line)?,
        mean: field(rec, 3, line)?,
        m2: field(rec, 4, line)?,
        m3: field(rec, 5, line)?,
        m4: field(rec, 6, line)?,
    })
}

pub fn read_summary<K: Key + FromStr, R: Read>(input: R) -> Result<FirstPassSummary<K>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = rdr.records();
    let mut next = |what: &str| -> Result<(csv::StringRecord, u64)> {
        let rec = records.next().ok_or_else(|| Error::Sidecar(format!("missing {what} record")))?.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        Ok((rec, line))
    };
    let (head, _) = next("header")?;
    if head.get(0) != Some(FORMAT_NAME) {
        return Err(Error::Sidecar("not a summary sidecar".into()));
    }
    let version: u32 = field(&head, 1, 1)?;
    if version != FORMAT_VERSION {
        return Err(Error::Sidecar(format!("unsupported version {version}")));
    }
    let (counts, line) = next("counts")?;
    if counts.get(0) != Some("counts") {
        return Err(Error::Sidecar(format!("line {line}: expected counts record")));
    }
    let n: u64 = field(&counts, 1, line)?;
    let r: usize = field(&counts, 2, line)?;
    let c: usize = field(&counts, 3, line)?;
    let raw_count: u64 = field(&counts, 4, line)?;
    let fingerprint = match counts.get(5) {
        Some(s) if !s.is_empty() => {
            Some(Fingerprint { count: field(&counts, 5, line)?, digest: field(&counts, 6, line)? })
        }
        _ => None,
    };
    let (g, line) = next("global")?;
    if g.get(0) != Some("global") {
        return Err(Error::Sidecar(format!("line {line}: expected global record")));
    }
    let global = read_acc(&g, line)?;
    if global.n != n {
        return Err(Error::Sidecar(format!("global count {} disagrees with N = {n}", global.n)));
    }
    let mut rows = Vec::with_capacity(r);
    let mut cols = Vec::with_capacity(c);
    for (expected, want, dst) in [("row", r, &mut rows), ("col", c, &mut cols)] {
        for _ in 0..want {
            let (rec, line) = next(expected)?;
            if rec.get(0) != Some(expected) {
                return Err(Error::Sidecar(format!("line {line}: expected {expected} record")));
            }
            let key: K = field(&rec, 1, line)?;
            dst.push((key, read_acc(&rec, line)?));
        }
    }
    if let Some(extra) = records.next() {
        let line = extra.ok().and_then(|r| r.position().map(|p| p.line())).unwrap_or(0);
        return Err(Error::Sidecar(format!("line {line}: trailing records")));
    }
    FirstPassSummary::from_parts(global, rows, cols, raw_count, fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Triple;
    use crate::pass::{first_pass, DuplicatePolicy};

    #[test]
    fn round_trip_is_lossless() {
        let t = vec![
            Triple::new("r,1".to_string(), "c\"a".to_string(), 0.1),
            Triple::new("r,1".to_string(), "b".to_string(), 1.0 / 3.0),
            Triple::new("z".to_string(), "b".to_string(), -7.25e-8),
        ];
        let fp = first_pass(t, DuplicatePolicy::Reject).unwrap();
        let mut buf = Vec::new();
        write_summary(&fp, &mut buf).unwrap();
        let back: FirstPassSummary<String> = read_summary(&buf[..]).unwrap();
        assert_eq!(back.global, fp.global);
        assert_eq!(back.rows(), fp.rows());
        assert_eq!(back.cols(), fp.cols());
        assert_eq!(back.row_keys().keys(), fp.row_keys().keys());
        assert_eq!(back.col_keys().keys(), fp.col_keys().keys());
        assert_eq!(back.raw_count(), 3);
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let t = vec![Triple::new(1u32, 2u32, 1.0)];
        let fp = first_pass(t, DuplicatePolicy::Reject).unwrap();
        let mut buf = Vec::new();
        write_summary(&fp, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bumped = text.replacen("crossmom-summary,1", "crossmom-summary,2", 1);
        assert!(read_summary::<u32, _>(bumped.as_bytes()).is_err());
        let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(read_summary::<u32, _>(cut.as_bytes()).is_err());
    }
}
