//! Triple files: CSV with a `row,col,value` header, read in line-aligned byte
//! ranges so each pass can run on several workers.
//!
//! Shard boundaries are found by scanning for newlines, so quoted fields must
//! not contain line breaks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crossmom_core::pass::{DuplicatePolicy, FirstPassSummary, SecondPass, SecondPassSummary};
use rayon::prelude::*;

use crate::CliError;

pub struct Source {
    path: PathBuf,
    len: u64,
    /// Byte offset of the first line after the header.
    body: u64,
}

fn header_fields(line: &str) -> Vec<String> {
    line.trim_end_matches(['\r', '\n']).split(',').map(|f| f.trim().to_ascii_lowercase()).collect()
}

impl Source {
    pub fn open(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let len = file.metadata().map_err(|e| CliError::io(path, e))?.len();
        let mut header = String::new();
        let body = BufReader::new(file).read_line(&mut header).map_err(|e| CliError::io(path, e))? as u64;
        if header_fields(&header) != ["row", "col", "value"] {
            return Err(CliError::data(format!("{}: line 1: expected header 'row,col,value'", path.display())));
        }
        Ok(Self { path: path.to_path_buf(), len, body })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Splits the body into at most `k` ranges that start at line boundaries.
    pub fn shards(&self, k: usize) -> Result<Vec<Range<u64>>, CliError> {
        let span = (self.len - self.body) as u128;
        let mut cuts = vec![self.body];
        let mut reader = BufReader::new(File::open(&self.path).map_err(|e| CliError::io(&self.path, e))?);
        let mut skipped = Vec::new();
        for s in 1..k {
            let target = self.body + (span * s as u128 / k as u128) as u64;
            let prev = *cuts.last().unwrap();
            if target <= prev {
                continue;
            }
            reader.seek(SeekFrom::Start(target - 1)).map_err(|e| CliError::io(&self.path, e))?;
            skipped.clear();
            let n = reader.read_until(b'\n', &mut skipped).map_err(|e| CliError::io(&self.path, e))?;
            let cut = target - 1 + n as u64;
            if cut > prev && cut < self.len {
                cuts.push(cut);
            }
        }
        cuts.push(self.len);
        Ok(cuts.windows(2).map(|w| w[0]..w[1]).collect())
    }

    fn lines_before(&self, offset: u64) -> io::Result<u64> {
        let mut reader = File::open(&self.path)?.take(offset);
        let mut buf = vec![0u8; 1 << 16];
        let mut lines = 0;
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                return Ok(lines);
            }
            lines += buf[..n].iter().filter(|&&b| b == b'\n').count() as u64;
        }
    }

    fn error_at(&self, start: u64, local_line: u64, what: impl std::fmt::Display) -> CliError {
        match self.lines_before(start) {
            Ok(before) => CliError::data(format!("{}: line {}: {what}", self.path.display(), before + local_line)),
            Err(_) => CliError::data(format!("{}: {what}", self.path.display())),
        }
    }

    /// Error for a repeated cell found while merging shards, pointing at its second occurrence.
    fn locate_duplicate(&self, row: &str, col: &str) -> CliError {
        let mut seen = false;
        let found = self.scan(self.body..self.len, |r, c, _| {
            if r == row && c == col {
                if seen {
                    return Err(crossmom_core::Error::DuplicateCell { row: row.into(), col: col.into() });
                }
                seen = true;
            }
            Ok(())
        });
        found.err().unwrap_or_else(|| CliError::data(format!("{}: duplicate cell ({row}, {col})", self.path.display())))
    }

    /// Calls `f` on every triple in `range`.
    pub fn scan<F>(&self, range: Range<u64>, mut f: F) -> Result<(), CliError>
    where
        F: FnMut(&str, &str, f64) -> crossmom_core::Result<()>,
    {
        let mut file = File::open(&self.path).map_err(|e| CliError::io(&self.path, e))?;
        file.seek(SeekFrom::Start(range.start)).map_err(|e| CliError::io(&self.path, e))?;
        let reader = BufReader::with_capacity(1 << 16, file.take(range.end - range.start));
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
        let mut rec = csv::StringRecord::new();
        loop {
            match rdr.read_record(&mut rec) {
                Ok(false) => return Ok(()),
                Ok(true) => {}
                Err(e) => {
                    let line = e.position().map_or(1, |p| p.line());
                    return Err(self.error_at(range.start, line, e));
                }
            }
            let line = rec.position().map_or(1, |p| p.line());
            if rec.len() != 3 {
                return Err(self.error_at(range.start, line, format!("expected 3 fields, found {}", rec.len())));
            }
            let value: f64 = match rec[2].parse() {
                Ok(v) => v,
                Err(_) => return Err(self.error_at(range.start, line, format!("cannot parse value '{}'", &rec[2]))),
            };
            if !value.is_finite() {
                return Err(self.error_at(range.start, line, format!("non-finite value '{}'", &rec[2])));
            }
            f(&rec[0], &rec[1], value).map_err(|e| self.error_at(range.start, line, e))?;
        }
    }
}

/// Runs the first pass over `ranges` in parallel and merges the shard
/// summaries in file order, so keys keep their first-seen order.
pub fn first_pass(
    src: &Source,
    ranges: &[Range<u64>],
    policy: DuplicatePolicy,
    fingerprint: bool,
) -> Result<FirstPassSummary<String>, CliError> {
    let parts: Vec<Result<FirstPassSummary<String>, CliError>> = ranges
        .par_iter()
        .map(|r| {
            let mut fp = FirstPassSummary::new(policy);
            if fingerprint {
                fp = fp.with_fingerprint();
            }
            src.scan(r.clone(), |row, col, v| fp.push(row, col, v))?;
            Ok(fp)
        })
        .collect();
    let mut merged: Option<FirstPassSummary<String>> = None;
    for part in parts {
        let part = part?;
        merged = Some(match merged {
            None => part,
            Some(acc) => acc.merge(part).map_err(|e| match e {
                crossmom_core::Error::DuplicateCell { row, col } => src.locate_duplicate(&row, &col),
                e => CliError::core(src.path(), e),
            })?,
        });
    }
    merged.expect("at least one shard").seal().map_err(|e| CliError::core(src.path(), e))
}

/// Cells whose values the second pass should capture, keyed by dense ids.
#[derive(Debug, Default)]
pub struct Targets {
    slots: HashMap<(usize, usize), usize>,
}

impl Targets {
    /// Registers a cell and returns its slot.
    pub fn add(&mut self, row: usize, col: usize) -> usize {
        let next = self.slots.len();
        *self.slots.entry((row, col)).or_insert(next)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Count and sum of the values seen for each target slot.
pub type Captured = Vec<(u32, f64)>;

pub fn second_pass(
    src: &Source,
    ranges: &[Range<u64>],
    fp: &FirstPassSummary<String>,
    targets: &Targets,
) -> Result<(SecondPassSummary, Captured), CliError> {
    let parts: Vec<Result<(SecondPass<'_, String>, Captured), CliError>> = ranges
        .par_iter()
        .map(|r| {
            let mut sp = SecondPass::new(fp);
            let mut captured = vec![(0u32, 0.0); targets.len()];
            src.scan(r.clone(), |row, col, v| {
                if !targets.is_empty() {
                    if let (Some(i), Some(j)) = (fp.row_id(row), fp.col_id(col)) {
                        if let Some(&slot) = targets.slots.get(&(i, j)) {
                            captured[slot].0 += 1;
                            captured[slot].1 += v;
                        }
                    }
                }
                sp.push(row, col, v)
            })?;
            Ok((sp, captured))
        })
        .collect();
    let mut merged: Option<(SecondPass<'_, String>, Captured)> = None;
    for part in parts {
        let (sp, cap) = part?;
        merged = Some(match merged {
            None => (sp, cap),
            Some((acc, mut total)) => {
                for (t, c) in total.iter_mut().zip(&cap) {
                    t.0 += c.0;
                    t.1 += c.1;
                }
                (acc.merge(sp), total)
            }
        });
    }
    let (sp, captured) = merged.expect("at least one shard");
    let sp = sp.finish().map_err(|e| CliError::core(src.path(), e))?;
    Ok((sp, captured))
}

/// Reads target cells from a CSV file with a `row,col` header.
pub fn read_cells(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if k == 0 {
            let fields: Vec<String> = rec.iter().map(|f| f.to_ascii_lowercase()).collect();
            if fields != ["row", "col"] {
                return Err(CliError::data(format!("{}: line 1: expected header 'row,col'", path.display())));
            }
            continue;
        }
        if rec.len() != 2 {
            return Err(CliError::data(format!(
                "{}: line {line}: expected 2 fields, found {}",
                path.display(),
                rec.len()
            )));
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    if out.is_empty() {
        return Err(CliError::data(format!("{}: no cells listed", path.display())));
    }
    Ok(out)
}
