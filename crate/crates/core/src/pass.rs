//! First and second streaming passes over the triples.
//!
//! Pass 1 keeps one [`GroupAccumulator`] per row, per column and for the whole
//! data set. Pass 2 needs the pass-1 counts and means and collects the
//! cross-count aggregates, co-observation totals and fourth central sums.
//! Both passes keep O(R + C) state (plus an O(N) cell ledger when duplicate
//! checking or averaging is on) and both support shard-then-merge execution.

use std::borrow::Borrow;
use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};

use crate::accum::GroupAccumulator;
use crate::error::{Error, Result};
use crate::model::{Key, Triple};
use crate::sum::CompensatedSum;

/// What to do when the same `(row, col)` cell appears more than once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DuplicatePolicy {
    /// Fail with [`Error::DuplicateCell`]. Keeps one 8-byte entry per cell.
    #[default]
    Reject,
    /// Replace repeated cells by the average of their values. Buffers every cell.
    Average,
    /// Caller vouches that cells are unique; no per-cell state.
    Trust,
}

/// Order-independent digest of a triple stream, used to check that both
/// passes saw the same data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Fingerprint {
    pub count: u64,
    pub digest: u64,
}

impl Fingerprint {
    fn add<Q: Hash + ?Sized>(&mut self, row: &Q, col: &Q, value: f64) {
        let mut h = DefaultHasher::new();
        row.hash(&mut h);
        0xfeu8.hash(&mut h);
        col.hash(&mut h);
        value.to_bits().hash(&mut h);
        self.count += 1;
        self.digest = self.digest.wrapping_add(h.finish());
    }

    fn merge(&mut self, other: &Fingerprint) {
        self.count += other.count;
        self.digest = self.digest.wrapping_add(other.digest);
    }
}

/// Bidirectional map between keys and dense first-seen indices.
#[derive(Debug, Clone)]
pub struct Interner<K> {
    index: HashMap<K, u32>,
    keys: Vec<K>,
}

impl<K: Key> Default for Interner<K> {
    fn default() -> Self {
        Self { index: HashMap::new(), keys: Vec::new() }
    }
}

impl<K: Key> Interner<K> {
    pub fn get<Q>(&self, key: &Q) -> Option<usize>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        self.index.get(key).map(|&i| i as usize)
    }

    fn intern<Q>(&mut self, key: &Q) -> (usize, bool)
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ToOwned<Owned = K> + ?Sized,
    {
        if let Some(&i) = self.index.get(key) {
            return (i as usize, false);
        }
        self.intern_owned(key.to_owned())
    }

    pub(crate) fn intern_owned(&mut self, key: K) -> (usize, bool) {
        match self.index.entry(key) {
            Entry::Occupied(e) => (*e.get() as usize, false),
            Entry::Vacant(e) => {
                let id = self.keys.len();
                self.keys.push(e.key().clone());
                e.insert(id as u32);
                (id, true)
            }
        }
    }

    pub fn key(&self, id: usize) -> &K {
        &self.keys[id]
    }

    pub fn keys(&self) -> &[K] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[inline]
fn cell_id(row: usize, col: usize) -> u64 {
    ((row as u64) << 32) | col as u64
}

#[inline]
fn split_cell(id: u64) -> (usize, usize) {
    ((id >> 32) as usize, (id & 0xffff_ffff) as usize)
}

/// Per-cell state that only exists while a pass is open.
#[derive(Debug, Clone, Default)]
enum CellLedger {
    #[default]
    None,
    Seen(HashSet<u64>),
    /// Insertion-ordered cell sums: `(cell, count, sum)`.
    Averaged {
        slot: HashMap<u64, usize>,
        cells: Vec<(u64, u32, f64)>,
    },
}

impl CellLedger {
    fn for_policy(policy: DuplicatePolicy) -> Self {
        match policy {
            DuplicatePolicy::Reject => CellLedger::Seen(HashSet::new()),
            DuplicatePolicy::Average => CellLedger::Averaged { slot: HashMap::new(), cells: Vec::new() },
            DuplicatePolicy::Trust => CellLedger::None,
        }
    }

    /// Records a cell. Returns false when a `Seen` ledger already had it.
    fn record(&mut self, cell: u64, value: f64) -> bool {
        match self {
            CellLedger::None => true,
            CellLedger::Seen(set) => set.insert(cell),
            CellLedger::Averaged { slot, cells } => {
                match slot.entry(cell) {
                    Entry::Occupied(e) => {
                        let c = &mut cells[*e.get()];
                        c.1 += 1;
                        c.2 += value;
                    }
                    Entry::Vacant(e) => {
                        e.insert(cells.len());
                        cells.push((cell, 1, value));
                    }
                }
                true
            }
        }
    }
}

/// Pass-1 output: accumulators for every row, every column and the whole data set.
#[derive(Debug, Clone)]
pub struct FirstPassSummary<K> {
    pub global: GroupAccumulator,
    rows: Vec<GroupAccumulator>,
    cols: Vec<GroupAccumulator>,
    row_keys: Interner<K>,
    col_keys: Interner<K>,
    policy: DuplicatePolicy,
    ledger: CellLedger,
    raw_count: u64,
    fingerprint: Option<Fingerprint>,
}

impl<K: Key> FirstPassSummary<K> {
    pub fn new(policy: DuplicatePolicy) -> Self {
        Self {
            global: GroupAccumulator::new(),
            rows: Vec::new(),
            cols: Vec::new(),
            row_keys: Interner::default(),
            col_keys: Interner::default(),
            policy,
            ledger: CellLedger::for_policy(policy),
            raw_count: 0,
            fingerprint: None,
        }
    }

    /// Also keep an order-independent digest of the stream so a second pass can
    /// verify it read the same data.
    pub fn with_fingerprint(mut self) -> Self {
        self.fingerprint = Some(Fingerprint::default());
        self
    }

    /// Rebuilds a sealed summary from stored parts, e.g. a sidecar file.
    pub fn from_parts(
        global: GroupAccumulator,
        rows: Vec<(K, GroupAccumulator)>,
        cols: Vec<(K, GroupAccumulator)>,
        raw_count: u64,
        fingerprint: Option<Fingerprint>,
    ) -> Result<Self> {
        let mut fp = Self::new(DuplicatePolicy::Trust);
        fp.global = global;
        for (k, acc) in rows {
            if !fp.row_keys.intern_owned(k.clone()).1 {
                return Err(Error::Sidecar(format!("row key {k} listed twice")));
            }
            fp.rows.push(acc);
        }
        for (k, acc) in cols {
            if !fp.col_keys.intern_owned(k.clone()).1 {
                return Err(Error::Sidecar(format!("column key {k} listed twice")));
            }
            fp.cols.push(acc);
        }
        fp.raw_count = raw_count;
        fp.fingerprint = fingerprint;
        let row_n: u64 = fp.rows.iter().map(|a| a.n).sum();
        let col_n: u64 = fp.cols.iter().map(|a| a.n).sum();
        if row_n != global.n || col_n != global.n {
            return Err(Error::Sidecar(format!("counts disagree: global {}, rows {row_n}, columns {col_n}", global.n)));
        }
        Ok(fp)
    }

    /// Adds one triple.
    pub fn push<Q>(&mut self, row: &Q, col: &Q, value: f64) -> Result<()>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ToOwned<Owned = K> + ?Sized,
    {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(value));
        }
        let (i, new_row) = self.row_keys.intern(row);
        if new_row {
            self.rows.push(GroupAccumulator::new());
        }
        let (j, new_col) = self.col_keys.intern(col);
        if new_col {
            self.cols.push(GroupAccumulator::new());
        }
        if !self.ledger.record(cell_id(i, j), value) {
            return Err(Error::DuplicateCell {
                row: self.row_keys.key(i).to_string(),
                col: self.col_keys.key(j).to_string(),
            });
        }
        if let Some(f) = self.fingerprint.as_mut() {
            f.add(row, col, value);
        }
        self.raw_count += 1;
        if self.policy != DuplicatePolicy::Average {
            self.add_cell(i, j, value);
        }
        Ok(())
    }

    #[inline]
    fn add_cell(&mut self, i: usize, j: usize, value: f64) {
        self.rows[i].push(value);
        self.cols[j].push(value);
        self.global.push(value);
    }

    /// Combines two shard summaries. Keys of `other` that are new to `self`
    /// are appended after the existing ones, so merging contiguous shards in
    /// stream order preserves first-seen order.
    pub fn merge(mut self, other: FirstPassSummary<K>) -> Result<Self> {
        if self.policy != other.policy {
            return Err(Error::InvalidParameter("cannot merge summaries with different duplicate policies".into()));
        }
        let row_map: Vec<usize> = other
            .row_keys
            .keys()
            .iter()
            .map(|k| {
                let (id, new) = self.row_keys.intern_owned(k.clone());
                if new {
                    self.rows.push(GroupAccumulator::new());
                }
                id
            })
            .collect();
        let col_map: Vec<usize> = other
            .col_keys
            .keys()
            .iter()
            .map(|k| {
                let (id, new) = self.col_keys.intern_owned(k.clone());
                if new {
                    self.cols.push(GroupAccumulator::new());
                }
                id
            })
            .collect();
        for (local, acc) in other.rows.iter().enumerate() {
            let g = row_map[local];
            self.rows[g] = self.rows[g].merge(acc);
        }
        for (local, acc) in other.cols.iter().enumerate() {
            let g = col_map[local];
            self.cols[g] = self.cols[g].merge(acc);
        }
        self.global = self.global.merge(&other.global);
        let remap = |cell: u64| {
            let (i, j) = split_cell(cell);
            cell_id(row_map[i], col_map[j])
        };
        match (&mut self.ledger, other.ledger) {
            (CellLedger::Seen(mine), CellLedger::Seen(theirs)) => {
                for cell in theirs {
                    let g = remap(cell);
                    if !mine.insert(g) {
                        let (i, j) = split_cell(g);
                        return Err(Error::DuplicateCell {
                            row: self.row_keys.key(i).to_string(),
                            col: self.col_keys.key(j).to_string(),
                        });
                    }
                }
            }
            (CellLedger::Averaged { slot, cells }, CellLedger::Averaged { cells: theirs, .. }) => {
                for (cell, count, sum) in theirs {
                    let g = remap(cell);
                    match slot.entry(g) {
                        Entry::Occupied(e) => {
                            let c = &mut cells[*e.get()];
                            c.1 += count;
                            c.2 += sum;
                        }
                        Entry::Vacant(e) => {
                            e.insert(cells.len());
                            cells.push((g, count, sum));
                        }
                    }
                }
            }
            _ => {}
        }
        self.raw_count += other.raw_count;
        match (self.fingerprint.as_mut(), other.fingerprint) {
            (Some(a), Some(b)) => a.merge(&b),
            _ => self.fingerprint = None,
        }
        Ok(self)
    }

    /// Closes the pass: applies averaged cells and drops the cell ledger.
    pub fn seal(mut self) -> Result<Self> {
        if let CellLedger::Averaged { cells, .. } = std::mem::take(&mut self.ledger) {
            for (cell, count, sum) in cells {
                let (i, j) = split_cell(cell);
                self.add_cell(i, j, sum / count as f64);
            }
        }
        if self.global.n == 0 {
            return Err(Error::EmptyData);
        }
        Ok(self)
    }

    pub fn n(&self) -> u64 {
        self.global.n
    }
    pub fn r(&self) -> usize {
        self.rows.len()
    }
    pub fn c(&self) -> usize {
        self.cols.len()
    }
    pub fn rows(&self) -> &[GroupAccumulator] {
        &self.rows
    }
    pub fn cols(&self) -> &[GroupAccumulator] {
        &self.cols
    }
    pub fn row_keys(&self) -> &Interner<K> {
        &self.row_keys
    }
    pub fn col_keys(&self) -> &Interner<K> {
        &self.col_keys
    }
    pub fn policy(&self) -> DuplicatePolicy {
        self.policy
    }
    /// Number of triples read, including repeats merged by averaging.
    pub fn raw_count(&self) -> u64 {
        self.raw_count
    }
    pub fn fingerprint(&self) -> Option<Fingerprint> {
        self.fingerprint
    }

    pub fn row_id<Q>(&self, key: &Q) -> Option<usize>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        self.row_keys.get(key)
    }

    pub fn col_id<Q>(&self, key: &Q) -> Option<usize>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        self.col_keys.get(key)
    }

    /// Count power sums, in exact integer arithmetic where the values are integers.
    pub fn count_sums(&self) -> Result<CountSums> {
        let (sum_ni, ni2, ni3, ni4, ni_inv, max_ni, arg_r) = power_sums(&self.rows)?;
        let (sum_nj, nj2, nj3, nj4, nj_inv, max_nj, arg_c) = power_sums(&self.cols)?;
        let n = self.global.n;
        if sum_ni != n as u128 || sum_nj != n as u128 {
            return Err(Error::StreamMismatch("row or column counts do not add up to N".into()));
        }
        Ok(CountSums {
            n,
            r: self.rows.len() as u64,
            c: self.cols.len() as u64,
            sum_ni2: ni2,
            sum_ni3: ni3,
            sum_ni4: ni4,
            sum_nj2: nj2,
            sum_nj3: nj3,
            sum_nj4: nj4,
            sum_ni_inv: ni_inv,
            sum_nj_inv: nj_inv,
            max_ni,
            max_nj,
            argmax_row: arg_r,
            argmax_col: arg_c,
        })
    }
}

type PowerSums = (u128, u128, u128, u128, f64, u64, usize);

fn power_sums(groups: &[GroupAccumulator]) -> Result<PowerSums> {
    let mut s1 = 0u128;
    let mut s2 = 0u128;
    let mut s3 = 0u128;
    let mut s4 = 0u128;
    let mut inv = CompensatedSum::new();
    let mut max = 0u64;
    let mut arg = 0usize;
    for (idx, g) in groups.iter().enumerate() {
        let k = g.n as u128;
        let k2 = k * k;
        let k3 = k2.checked_mul(k).ok_or(Error::Overflow("count power sums"))?;
        let k4 = k3.checked_mul(k).ok_or(Error::Overflow("count power sums"))?;
        s1 += k;
        s2 = s2.checked_add(k2).ok_or(Error::Overflow("count power sums"))?;
        s3 = s3.checked_add(k3).ok_or(Error::Overflow("count power sums"))?;
        s4 = s4.checked_add(k4).ok_or(Error::Overflow("count power sums"))?;
        if g.n > 0 {
            inv.add(1.0 / g.n as f64);
        }
        // Strict comparison keeps the first-seen group on ties.
        if g.n > max {
            max = g.n;
            arg = idx;
        }
    }
    Ok((s1, s2, s3, s4, inv.value(), max, arg))
}

/// Count aggregates available after pass 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountSums {
    pub n: u64,
    pub r: u64,
    pub c: u64,
    pub sum_ni2: u128,
    pub sum_ni3: u128,
    pub sum_ni4: u128,
    pub sum_nj2: u128,
    pub sum_nj3: u128,
    pub sum_nj4: u128,
    pub sum_ni_inv: f64,
    pub sum_nj_inv: f64,
    pub max_ni: u64,
    pub max_nj: u64,
    pub argmax_row: usize,
    pub argmax_col: usize,
}

/// Streams `triples` through a fresh first pass.
pub fn first_pass<K, I>(triples: I, policy: DuplicatePolicy) -> Result<FirstPassSummary<K>>
where
    K: Key,
    I: IntoIterator<Item = Triple<K>>,
{
    let mut fp = FirstPassSummary::new(policy);
    for t in triples {
        fp.push(&t.row, &t.col, t.value)?;
    }
    fp.seal()
}

/// The cross-count sums `Σ_ij Z_ij N_i^p N_j^q` for the six `(p, q)` pairs the
/// covariance formulas need. Field names spell the exponents: `m` is -1, `p`
/// is +1, `2` is +2.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ZnSums {
    pub mm: f64,
    pub pm: f64,
    pub mp: f64,
    /// `Σ Z_ij N_i N_j`, exact.
    pub pp: u128,
    pub m2: f64,
    pub two_m: f64,
}

/// Pass-2 output.
#[derive(Debug, Clone)]
pub struct SecondPassSummary {
    pub zn: ZnSums,
    /// `T_i = Σ_j Z_ij N_j`.
    pub t_row: Vec<u64>,
    /// `T_j = Σ_i Z_ij N_i`.
    pub t_col: Vec<u64>,
    /// `Σ_j Z_ij / N_j` for each row.
    pub inv_col_row: Vec<f64>,
    /// `Σ_i Z_ij / N_i` for each column.
    pub inv_row_col: Vec<f64>,
    /// `Σ_j Z_ij (Y_ij - Ȳ_i)^4` about the pass-1 row means.
    pub fourth_row: Vec<f64>,
    pub fourth_col: Vec<f64>,
    pub fourth_global: f64,
    /// Second central sums recomputed against the pass-1 means. Unlike the
    /// streaming pass-1 values they do not depend on how the stream was split.
    pub second_row: Vec<f64>,
    pub second_col: Vec<f64>,
    pub second_global: f64,
    pub count: u64,
    pub fingerprint: Option<Fingerprint>,
}

/// Compensated power sums of deviations from a fixed center.
#[derive(Debug, Clone, Copy, Default)]
struct Deviations {
    first: CompensatedSum,
    second: CompensatedSum,
    fourth: CompensatedSum,
}

impl Deviations {
    #[inline]
    fn add(&mut self, d: f64) {
        let d2 = d * d;
        self.first.add(d);
        self.second.add(d2);
        self.fourth.add(d2 * d2);
    }

    fn merge(&mut self, other: &Deviations) {
        self.first.merge(&other.first);
        self.second.merge(&other.second);
        self.fourth.merge(&other.fourth);
    }

    /// Sum of squared deviations from the mean of the values added.
    fn second_central(&self, n: u64) -> f64 {
        let s1 = self.first.value();
        (self.second.value() - s1 * s1 / n as f64).max(0.0)
    }
}

/// Open second pass bound to a sealed first-pass summary.
#[derive(Debug, Clone)]
pub struct SecondPass<'a, K> {
    fp: &'a FirstPassSummary<K>,
    inv_row: Vec<f64>,
    inv_col: Vec<f64>,
    zn_mm: CompensatedSum,
    zn_pm: CompensatedSum,
    zn_mp: CompensatedSum,
    zn_pp: u128,
    zn_m2: CompensatedSum,
    zn_2m: CompensatedSum,
    t_row: Vec<u64>,
    t_col: Vec<u64>,
    inv_col_row: Vec<f64>,
    inv_row_col: Vec<f64>,
    dev_row: Vec<Deviations>,
    dev_col: Vec<Deviations>,
    dev_global: Deviations,
    count: u64,
    raw_count: u64,
    averaged: Option<HashMap<u64, (u32, f64)>>,
    fingerprint: Option<Fingerprint>,
}

impl<'a, K: Key> SecondPass<'a, K> {
    pub fn new(fp: &'a FirstPassSummary<K>) -> Self {
        let inv = |g: &[GroupAccumulator]| g.iter().map(|a| 1.0 / a.n as f64).collect::<Vec<_>>();
        Self {
            fp,
            inv_row: inv(fp.rows()),
            inv_col: inv(fp.cols()),
            zn_mm: CompensatedSum::new(),
            zn_pm: CompensatedSum::new(),
            zn_mp: CompensatedSum::new(),
            zn_pp: 0,
            zn_m2: CompensatedSum::new(),
            zn_2m: CompensatedSum::new(),
            t_row: vec![0; fp.r()],
            t_col: vec![0; fp.c()],
            inv_col_row: vec![0.0; fp.r()],
            inv_row_col: vec![0.0; fp.c()],
            dev_row: vec![Deviations::default(); fp.r()],
            dev_col: vec![Deviations::default(); fp.c()],
            dev_global: Deviations::default(),
            count: 0,
            raw_count: 0,
            averaged: (fp.policy() == DuplicatePolicy::Average).then(HashMap::new),
            fingerprint: fp.fingerprint().map(|_| Fingerprint::default()),
        }
    }

    pub fn push<Q>(&mut self, row: &Q, col: &Q, value: f64) -> Result<()>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(value));
        }
        let i = self.fp.row_id(row).ok_or_else(|| Error::UnknownKey { factor: "row", key: display_key(row) })?;
        let j = self.fp.col_id(col).ok_or_else(|| Error::UnknownKey { factor: "column", key: display_key(col) })?;
        if let Some(f) = self.fingerprint.as_mut() {
            f.add(row, col, value);
        }
        self.raw_count += 1;
        match self.averaged.as_mut() {
            Some(cells) => {
                let c = cells.entry(cell_id(i, j)).or_insert((0, 0.0));
                c.0 += 1;
                c.1 += value;
            }
            None => self.add_cell(i, j, value),
        }
        Ok(())
    }

    #[inline]
    fn add_cell(&mut self, i: usize, j: usize, y: f64) {
        let ni = self.fp.rows[i].n;
        let nj = self.fp.cols[j].n;
        let (nif, njf) = (ni as f64, nj as f64);
        let (ii, ij) = (self.inv_row[i], self.inv_col[j]);
        self.zn_mm.add(ii * ij);
        self.zn_pm.add(nif * ij);
        self.zn_mp.add(ii * njf);
        self.zn_pp += ni as u128 * nj as u128;
        self.zn_m2.add(ii * njf * njf);
        self.zn_2m.add(nif * nif * ij);
        self.t_row[i] += nj;
        self.t_col[j] += ni;
        self.inv_col_row[i] += ij;
        self.inv_row_col[j] += ii;
        self.dev_row[i].add(y - self.fp.rows[i].mean);
        self.dev_col[j].add(y - self.fp.cols[j].mean);
        self.dev_global.add(y - self.fp.global.mean);
        self.count += 1;
    }

    /// Adds another shard bound to the same first-pass summary.
    pub fn merge(mut self, other: SecondPass<'a, K>) -> Self {
        debug_assert!(std::ptr::eq(self.fp, other.fp));
        self.zn_mm.merge(&other.zn_mm);
        self.zn_pm.merge(&other.zn_pm);
        self.zn_mp.merge(&other.zn_mp);
        self.zn_pp += other.zn_pp;
        self.zn_m2.merge(&other.zn_m2);
        self.zn_2m.merge(&other.zn_2m);
        add_into(&mut self.t_row, &other.t_row);
        add_into(&mut self.t_col, &other.t_col);
        add_into(&mut self.inv_col_row, &other.inv_col_row);
        add_into(&mut self.inv_row_col, &other.inv_row_col);
        for (d, o) in self.dev_row.iter_mut().zip(&other.dev_row) {
            d.merge(o);
        }
        for (d, o) in self.dev_col.iter_mut().zip(&other.dev_col) {
            d.merge(o);
        }
        self.dev_global.merge(&other.dev_global);
        self.count += other.count;
        self.raw_count += other.raw_count;
        if let (Some(mine), Some(theirs)) = (self.averaged.as_mut(), other.averaged) {
            for (cell, (k, s)) in theirs {
                let c = mine.entry(cell).or_insert((0, 0.0));
                c.0 += k;
                c.1 += s;
            }
        }
        if let (Some(a), Some(b)) = (self.fingerprint.as_mut(), other.fingerprint) {
            a.merge(&b);
        }
        self
    }

    pub fn finish(mut self) -> Result<SecondPassSummary> {
        if let Some(cells) = self.averaged.take() {
            let mut cells: Vec<_> = cells.into_iter().collect();
            cells.sort_unstable_by_key(|c| c.0);
            for (cell, (k, s)) in cells {
                let (i, j) = split_cell(cell);
                self.add_cell(i, j, s / k as f64);
            }
        }
        if self.raw_count != self.fp.raw_count() || self.count != self.fp.n() {
            return Err(Error::StreamMismatch(format!(
                "first pass read {} triples, second pass {}",
                self.fp.raw_count(),
                self.raw_count
            )));
        }
        if let (Some(a), Some(b)) = (self.fingerprint, self.fp.fingerprint()) {
            if a != b {
                return Err(Error::StreamMismatch("content digest differs".into()));
            }
        }
        let zn = ZnSums {
            mm: self.zn_mm.value(),
            pm: self.zn_pm.value(),
            mp: self.zn_mp.value(),
            pp: self.zn_pp,
            m2: self.zn_m2.value(),
            two_m: self.zn_2m.value(),
        };
        for v in [zn.mm, zn.pm, zn.mp, zn.pp as f64, zn.m2, zn.two_m] {
            if !(v.abs() <= 1e300) {
                return Err(Error::Overflow("cross-count sums"));
            }
        }
        Ok(SecondPassSummary {
            zn,
            t_row: self.t_row,
            t_col: self.t_col,
            inv_col_row: self.inv_col_row,
            inv_row_col: self.inv_row_col,
            fourth_row: self.dev_row.iter().map(|d| d.fourth.value()).collect(),
            fourth_col: self.dev_col.iter().map(|d| d.fourth.value()).collect(),
            fourth_global: self.dev_global.fourth.value(),
            second_row: self.dev_row.iter().zip(self.fp.rows()).map(|(d, g)| d.second_central(g.n)).collect(),
            second_col: self.dev_col.iter().zip(self.fp.cols()).map(|(d, g)| d.second_central(g.n)).collect(),
            second_global: self.dev_global.second_central(self.count),
            count: self.count,
            fingerprint: self.fingerprint,
        })
    }
}

fn add_into<T: Copy + std::ops::AddAssign>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn display_key<Q: Hash + ?Sized>(key: &Q) -> String {
    // Borrowed key forms need not be printable; report a stable hash instead.
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    format!("#{:016x}", h.finish())
}

/// Streams `triples` through a second pass against `fp`.
pub fn second_pass<K, I>(triples: I, fp: &FirstPassSummary<K>) -> Result<SecondPassSummary>
where
    K: Key,
    I: IntoIterator<Item = Triple<K>>,
{
    let mut sp = SecondPass::new(fp);
    for t in triples {
        sp.push(&t.row, &t.col, t.value)?;
    }
    sp.finish()
}

/// Every count aggregate the variance and prediction layers read, gathered
/// from both passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSums {
    pub counts: CountSums,
    pub zn: ZnSums,
    /// `Σ_i T_i² / N_i`.
    pub sum_trow2_over_ni: f64,
    /// `Σ_j T_j² / N_j`.
    pub sum_tcol2_over_nj: f64,
    /// `Σ_{ir} (ZZᵀ)_ir (1 - 1/N_i)(1 - 1/N_r)`, evaluated column by column.
    pub row_pair_weight: f64,
    /// `Σ_{ir} (ZZᵀ)_ir / (N_i N_r)`.
    pub row_pair_inv: f64,
    /// Column analogue of `row_pair_weight` over `ZᵀZ`.
    pub col_pair_weight: f64,
    pub col_pair_inv: f64,
    /// `Σ_ij Z_ij (1 - 1/N_i)(1 - 1/N_j)`.
    pub both_weight: f64,
    /// `Σ_ij Z_ij (N - N_j) N_j (1 - 1/N_i)`.
    pub row_cross_weight: f64,
    /// `Σ_ij Z_ij (N - N_i) N_i (1 - 1/N_j)`.
    pub col_cross_weight: f64,
}

impl PatternSums {
    pub fn new<K: Key>(fp: &FirstPassSummary<K>, sp: &SecondPassSummary) -> Result<Self> {
        let counts = fp.count_sums()?;
        let sum_trow2_over_ni = fp
            .rows()
            .iter()
            .zip(&sp.t_row)
            .map(|(g, &t)| (t as f64) * (t as f64) / g.n as f64)
            .collect::<CompensatedSum>()
            .value();
        let sum_tcol2_over_nj = fp
            .cols()
            .iter()
            .zip(&sp.t_col)
            .map(|(g, &t)| (t as f64) * (t as f64) / g.n as f64)
            .collect::<CompensatedSum>()
            .value();
        let (row_pair_weight, row_pair_inv) = pair_sums(fp.cols(), &sp.inv_row_col);
        let (col_pair_weight, col_pair_inv) = pair_sums(fp.rows(), &sp.inv_col_row);
        // Each weight factors per column (or row) through Σ_i Z_ij (1 - 1/N_i) = N_j - v_j,
        // which keeps every term nonnegative.
        let n = fp.n() as f64;
        let both_weight = fp
            .cols()
            .iter()
            .zip(&sp.inv_row_col)
            .map(|(g, &v)| {
                let nj = g.n as f64;
                (1.0 - 1.0 / nj) * (nj - v)
            })
            .collect::<CompensatedSum>()
            .value();
        let cross = |groups: &[crate::accum::GroupAccumulator], inv: &[f64]| {
            groups
                .iter()
                .zip(inv)
                .map(|(g, &v)| {
                    let k = g.n as f64;
                    (n - k) * k * (k - v)
                })
                .collect::<CompensatedSum>()
                .value()
        };
        let row_cross_weight = cross(fp.cols(), &sp.inv_row_col);
        let col_cross_weight = cross(fp.rows(), &sp.inv_col_row);
        let out = Self {
            counts,
            zn: sp.zn,
            sum_trow2_over_ni,
            sum_tcol2_over_nj,
            row_pair_weight,
            row_pair_inv,
            col_pair_weight,
            col_pair_inv,
            both_weight,
            row_cross_weight,
            col_cross_weight,
        };
        for v in [sum_trow2_over_ni, sum_tcol2_over_nj, row_pair_weight, col_pair_weight] {
            if !(v.abs() <= 1e300) {
                return Err(Error::Overflow("co-observation sums"));
            }
        }
        Ok(out)
    }

    pub fn n(&self) -> f64 {
        self.counts.n as f64
    }
    pub fn r(&self) -> f64 {
        self.counts.r as f64
    }
    pub fn c(&self) -> f64 {
        self.counts.c as f64
    }
}

/// With `v_j = Σ_i Z_ij / N_i` for each column `j`,
/// `Σ_{ir} (ZZᵀ)_ir f_i f_r = Σ_j (Σ_i Z_ij f_i)²` for any row weights `f`.
/// Returns the sums for `f_i = 1 - 1/N_i` and `f_i = 1/N_i`.
fn pair_sums(groups: &[GroupAccumulator], inv_sums: &[f64]) -> (f64, f64) {
    let mut weight = CompensatedSum::new();
    let mut inv = CompensatedSum::new();
    for (g, &v) in groups.iter().zip(inv_sums) {
        let w = g.n as f64 - v;
        weight.add(w * w);
        inv.add(v * v);
    }
    (weight.value(), inv.value())
}

/// Balance diagnostics. `delta` is the largest of the eight ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationCounts {
    pub n: u64,
    pub r: u64,
    pub c: u64,
    pub eps_r: f64,
    pub eps_c: f64,
    pub sum_ni2: f64,
    pub sum_nj2: f64,
    pub sum_ni_inv: f64,
    pub sum_nj_inv: f64,
    pub r_over_n: f64,
    pub c_over_n: f64,
    pub n_over_sum_ni2: f64,
    pub n_over_sum_nj2: f64,
    /// `ZN^{-1,1} / ΣN_i²`.
    pub zn_mp_over_sum_ni2: f64,
    /// `ZN^{1,-1} / ΣN_j²`.
    pub zn_pm_over_sum_nj2: f64,
    pub delta: f64,
    /// First-seen row attaining `eps_r`.
    pub argmax_row: usize,
    pub argmax_col: usize,
}

impl ObservationCounts {
    pub fn ratios(&self) -> [f64; 8] {
        [
            self.eps_r,
            self.eps_c,
            self.r_over_n,
            self.c_over_n,
            self.n_over_sum_ni2,
            self.n_over_sum_nj2,
            self.zn_mp_over_sum_ni2,
            self.zn_pm_over_sum_nj2,
        ]
    }
}

pub fn compute_delta(pattern: &PatternSums) -> ObservationCounts {
    let c = &pattern.counts;
    let n = c.n as f64;
    let sum_ni2 = c.sum_ni2 as f64;
    let sum_nj2 = c.sum_nj2 as f64;
    let mut out = ObservationCounts {
        n: c.n,
        r: c.r,
        c: c.c,
        eps_r: c.max_ni as f64 / n,
        eps_c: c.max_nj as f64 / n,
        sum_ni2,
        sum_nj2,
        sum_ni_inv: c.sum_ni_inv,
        sum_nj_inv: c.sum_nj_inv,
        r_over_n: c.r as f64 / n,
        c_over_n: c.c as f64 / n,
        n_over_sum_ni2: n / sum_ni2,
        n_over_sum_nj2: n / sum_nj2,
        zn_mp_over_sum_ni2: pattern.zn.mp / sum_ni2,
        zn_pm_over_sum_nj2: pattern.zn.pm / sum_nj2,
        delta: 0.0,
        argmax_row: c.argmax_row,
        argmax_col: c.argmax_col,
    };
    out.delta = out.ratios().into_iter().fold(0.0, f64::max);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<Triple<u32>> {
        vec![Triple::new(1, 1, 0.0), Triple::new(1, 2, 2.0), Triple::new(2, 1, 1.0), Triple::new(2, 2, 3.0)]
    }

    #[test]
    fn first_pass_on_two_by_two() {
        let fp = first_pass(grid(), DuplicatePolicy::Reject).unwrap();
        assert_eq!((fp.n(), fp.r(), fp.c()), (4, 2, 2));
        assert_eq!(fp.rows()[0].m2, 2.0);
        assert_eq!(fp.rows()[1].m2, 2.0);
        assert_eq!(fp.cols()[0].m2, 0.5);
        assert_eq!(fp.cols()[1].m2, 0.5);
        assert_eq!(fp.global.m2, 5.0);
    }

    #[test]
    fn single_row() {
        let fp = first_pass(vec![Triple::new(0u32, 0, 0.0), Triple::new(0, 1, 2.0)], DuplicatePolicy::Reject).unwrap();
        assert_eq!((fp.n(), fp.r(), fp.c()), (2, 1, 2));
        assert_eq!(fp.rows()[0].m2, 2.0);
        assert!(fp.cols().iter().all(|g| g.m2 == 0.0));
    }

    #[test]
    fn duplicates() {
        let mut t = grid();
        t.push(Triple::new(2, 1, 5.0));
        let err = first_pass(t.clone(), DuplicatePolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::DuplicateCell { .. }));
        let fp = first_pass(t.clone(), DuplicatePolicy::Average).unwrap();
        assert_eq!(fp.n(), 4);
        assert_eq!(fp.raw_count(), 5);
        assert_eq!(fp.rows()[1].mean, (3.0 + 3.0) / 2.0);
        let sp = second_pass(t, &fp).unwrap();
        assert_eq!(sp.count, 4);
    }

    #[test]
    fn empty_and_non_finite() {
        assert!(matches!(first_pass(Vec::<Triple<u32>>::new(), DuplicatePolicy::Reject), Err(Error::EmptyData)));
        let err = first_pass(vec![Triple::new(0u32, 0, f64::NAN)], DuplicatePolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue(_)));
    }

    #[test]
    fn second_pass_on_two_by_two() {
        let fp = first_pass(grid(), DuplicatePolicy::Reject).unwrap();
        let sp = second_pass(grid(), &fp).unwrap();
        assert_eq!(sp.zn.pp, 16);
        assert_eq!(sp.zn.mm, 1.0);
        assert_eq!(sp.t_row, vec![4, 4]);
        assert_eq!(sp.fourth_row, vec![2.0, 2.0]);
        assert_eq!(sp.second_row, fp.rows().iter().map(|g| g.m2).collect::<Vec<_>>());
        assert_eq!(sp.second_global, fp.global.m2);
    }

    #[test]
    fn second_pass_rejects_unknown_keys_and_short_streams() {
        let fp = first_pass(grid(), DuplicatePolicy::Reject).unwrap();
        let mut other = grid();
        other[3].row = 9;
        assert!(matches!(second_pass(other, &fp), Err(Error::UnknownKey { .. })));
        assert!(matches!(second_pass(grid()[..3].to_vec(), &fp), Err(Error::StreamMismatch(_))));
    }

    #[test]
    fn fingerprint_catches_changed_values() {
        let mut fp = FirstPassSummary::new(DuplicatePolicy::Reject).with_fingerprint();
        for t in grid() {
            fp.push(&t.row, &t.col, t.value).unwrap();
        }
        let fp = fp.seal().unwrap();
        let mut reordered = grid();
        reordered.reverse();
        assert!(second_pass(reordered, &fp).is_ok());
        let mut changed = grid();
        changed[0].value = 0.5;
        assert!(matches!(second_pass(changed, &fp), Err(Error::StreamMismatch(_))));
    }

    #[test]
    fn iid_pattern_sums() {
        let t: Vec<_> = (0..7u32).map(|k| Triple::new(k, k, k as f64)).collect();
        let fp = first_pass(t.clone(), DuplicatePolicy::Reject).unwrap();
        let sp = second_pass(t, &fp).unwrap();
        let z = sp.zn;
        for v in [z.mm, z.pm, z.mp, z.pp as f64, z.m2, z.two_m] {
            assert_eq!(v, 7.0);
        }
    }

    #[test]
    fn one_row_totals() {
        let t: Vec<_> = (0..5u32).map(|k| Triple::new(0, k, 1.0)).collect();
        let fp = first_pass(t.clone(), DuplicatePolicy::Reject).unwrap();
        let sp = second_pass(t, &fp).unwrap();
        assert_eq!(sp.t_row, vec![5]);
        assert_eq!(sp.t_col, vec![5; 5]);
    }

    #[test]
    fn delta_on_two_by_two() {
        let fp = first_pass(grid(), DuplicatePolicy::Reject).unwrap();
        let sp = second_pass(grid(), &fp).unwrap();
        let d = compute_delta(&PatternSums::new(&fp, &sp).unwrap());
        for r in d.ratios() {
            assert_eq!(r, 0.5);
        }
        assert_eq!(d.delta, 0.5);
    }

    #[test]
    fn single_column_has_delta_one() {
        let t: Vec<_> = (0..6u32).map(|k| Triple::new(k, 0, k as f64)).collect();
        let fp = first_pass(t.clone(), DuplicatePolicy::Reject).unwrap();
        let sp = second_pass(t, &fp).unwrap();
        let d = compute_delta(&PatternSums::new(&fp, &sp).unwrap());
        assert_eq!(d.eps_c, 1.0);
        // ZN^{-1,1} / ΣN_i² = 36 / 6 dominates the other ratios.
        assert_eq!(d.zn_mp_over_sum_ni2, 6.0);
        assert_eq!(d.delta, 6.0);
    }

    #[test]
    fn argmax_reports_first_seen_row() {
        let t = vec![Triple::new(5u32, 0, 1.0), Triple::new(3, 0, 1.0), Triple::new(3, 1, 1.0), Triple::new(5, 1, 1.0)];
        let fp = first_pass(t, DuplicatePolicy::Reject).unwrap();
        let c = fp.count_sums().unwrap();
        assert_eq!(*fp.row_keys().key(c.argmax_row), 5);
    }

    #[test]
    fn merge_detects_cross_shard_duplicates() {
        let a = first_pass(grid()[..2].to_vec(), DuplicatePolicy::Reject);
        let mut fp_a = FirstPassSummary::new(DuplicatePolicy::Reject);
        for t in &grid()[..3] {
            fp_a.push(&t.row, &t.col, t.value).unwrap();
        }
        let mut fp_b = FirstPassSummary::new(DuplicatePolicy::Reject);
        fp_b.push(&1u32, &2u32, 9.0).unwrap();
        assert!(a.is_ok());
        assert!(matches!(fp_a.merge(fp_b), Err(Error::DuplicateCell { .. })));
    }
}
