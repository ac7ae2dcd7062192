//! Row-wise butterfly factorization of `Φ` over a space tree and a
//! frequency tree of equal depth `L`.
//!
//! Butterfly level `ℓ` pairs space nodes at depth `ℓ` with frequency nodes
//! at depth `L − ℓ`. Level 0 compresses every frequency leaf band
//! `Φ(:, ν) ≈ A_ν V_ν^*`. At level `ℓ ≥ 1`, for a space node `τ` with parent
//! `p` and a frequency node `ν` with children `c_i`,
//!
//! ```text
//! [A_{p,c_1}(τ,:) … A_{p,c_a}(τ,:)] ≈ A_{τν} R_{τν}^*
//! ```
//!
//! and `R_{τν}` is stored. At level `L` the remaining `A_{τ,root}` are the
//! leaf column bases `U_τ`. Stored right factors `V` and `R` have
//! orthonormal columns; the scale is carried by the propagated `A`.
//!
//! Applying `Φc` runs `V^*`, then every `R^*` from level 1 to `L`, then `U`,
//! which is a downward pass through the frequency tree (root ← leaves order
//! of the frequency index) paired with an upward pass through the space
//! tree. The adjoint runs the same factors conjugate-transposed in reverse.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{compress_block, DenseMatrix, C64};
use crate::parallel::{map_range, try_map_range, Execution};
use crate::tree::IndexTree;

/// Pull-based source of column bands of `Φ`.
pub trait ColumnBandProvider {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `Φ(:, columns)` for a sorted list of column indices.
    fn band(&mut self, columns: &[usize]) -> Result<DenseMatrix>;
}

/// Provider over an in-memory matrix.
pub struct DenseProvider<'a> {
    phi: &'a DenseMatrix,
}

impl<'a> DenseProvider<'a> {
    pub fn new(phi: &'a DenseMatrix) -> Self {
        Self { phi }
    }
}

impl ColumnBandProvider for DenseProvider<'_> {
    fn rows(&self) -> usize {
        self.phi.rows()
    }

    fn cols(&self) -> usize {
        self.phi.cols()
    }

    fn band(&mut self, columns: &[usize]) -> Result<DenseMatrix> {
        self.phi
            .select_columns(columns)
            .map_err(|e| Error::Stream(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ButterflyOptions {
    /// Relative Frobenius tolerance applied to every block compression.
    pub tol: f64,
    pub execution: Execution,
    /// Streaming builds park completed sibling factors in anonymous
    /// temporary files until their parent merges them.
    pub spill: bool,
}

impl ButterflyOptions {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            execution: Execution::default(),
            spill: false,
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn with_spill(mut self, spill: bool) -> Self {
        self.spill = spill;
        self
    }
}

/// A compressed `n × m` operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ButterflyFactor {
    space: IndexTree,
    freq: IndexTree,
    tol: f64,
    /// `V_ν` by frequency-leaf position.
    row_bases: Vec<DenseMatrix>,
    /// `transfers[ℓ − 1][τ·F + ν]` for `ℓ = 1..=L`, `F = #freq nodes at depth L − ℓ`.
    transfers: Vec<Vec<DenseMatrix>>,
    /// `U_τ` by space-leaf position.
    col_bases: Vec<DenseMatrix>,
}

/// Storage accounting for a factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub tol: f64,
    /// Stored complex entries: row bases, transfers for levels 1..L, column bases.
    pub entries_per_level: Vec<usize>,
    pub stored_entries: usize,
    pub total_bytes: usize,
    /// `ranks[ℓ][τ·F + ν]` for butterfly levels `0..=L`.
    pub ranks: Vec<Vec<usize>>,
    pub max_rank: usize,
    pub dense_entries: usize,
    pub compression_factor: f64,
}

const ENTRY_BYTES: usize = std::mem::size_of::<C64>();

fn check_trees(space: &IndexTree, freq: &IndexTree, n: usize, m: usize) -> Result<()> {
    if space.depth() != freq.depth() {
        return Err(Error::Config(format!(
            "space tree depth {} differs from frequency tree depth {}",
            space.depth(),
            freq.depth()
        )));
    }
    if space.size() != n {
        return Err(Error::Config(format!(
            "space tree covers {} rows, matrix has {n}",
            space.size()
        )));
    }
    if freq.size() != m {
        return Err(Error::Config(format!(
            "frequency tree covers {} columns, matrix has {m}",
            freq.size()
        )));
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidInput(format!("tolerance must lie in (0, 1), got {tol}")));
    }
    Ok(())
}

/// Receives factors as the build emits them.
///
/// `level` is 0 for row bases (`tau = 0`), `1..=L` for transfer matrices and
/// `L + 1` for column bases (`nu = 0`); `tau` and `nu` are positions within
/// their tree levels.
pub trait FactorSink {
    fn accept(&mut self, level: usize, tau: usize, nu: usize, factor: DenseMatrix) -> Result<()>;
}

/// Keeps every factor and assembles a [`ButterflyFactor`].
pub struct StoringSink {
    depth: usize,
    slots: Vec<Vec<Option<DenseMatrix>>>,
    nf: Vec<usize>,
}

impl StoringSink {
    pub fn new(space: &IndexTree, freq: &IndexTree) -> Self {
        let l = space.depth();
        let nf: Vec<usize> = (0..=l).map(|lv| freq.level_len(l - lv)).collect();
        let mut slots = Vec::with_capacity(l + 2);
        for lv in 0..=l {
            slots.push(vec![None; space.level_len(lv) * nf[lv]]);
        }
        slots.push(vec![None; space.level_len(l)]);
        Self {
            depth: l,
            slots,
            nf,
        }
    }

    fn finish(self, space: IndexTree, freq: IndexTree, tol: f64) -> Result<ButterflyFactor> {
        let mut levels = self
            .slots
            .into_iter()
            .map(|lv| {
                lv.into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Stream("factorization ended with missing blocks".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let col_bases = levels.pop().unwrap();
        let row_bases = levels.remove(0);
        Ok(ButterflyFactor {
            space,
            freq,
            tol,
            row_bases,
            transfers: levels,
            col_bases,
        })
    }
}

impl FactorSink for StoringSink {
    fn accept(&mut self, level: usize, tau: usize, nu: usize, factor: DenseMatrix) -> Result<()> {
        let idx = if level <= self.depth {
            tau * self.nf[level] + nu
        } else {
            tau
        };
        let slot = self
            .slots
            .get_mut(level)
            .and_then(|s| s.get_mut(idx))
            .ok_or_else(|| Error::Stream(format!("block ({level}, {tau}, {nu}) out of range")))?;
        if slot.replace(factor).is_some() {
            return Err(Error::Stream(format!("block ({level}, {tau}, {nu}) emitted twice")));
        }
        Ok(())
    }
}

/// Counts entries and ranks without retaining factors.
#[derive(Clone, Debug, Default)]
pub struct CountingSink {
    pub entries_per_level: Vec<usize>,
    pub blocks: usize,
}

impl CountingSink {
    pub fn new(depth: usize) -> Self {
        Self {
            entries_per_level: vec![0; depth + 2],
            blocks: 0,
        }
    }

    pub fn stored_entries(&self) -> usize {
        self.entries_per_level.iter().sum()
    }
}

impl FactorSink for CountingSink {
    fn accept(&mut self, level: usize, _tau: usize, _nu: usize, factor: DenseMatrix) -> Result<()> {
        if level >= self.entries_per_level.len() {
            self.entries_per_level.resize(level + 1, 0);
        }
        self.entries_per_level[level] += factor.len();
        self.blocks += 1;
        Ok(())
    }
}

/// Instrumentation of a factorization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub tol: f64,
    pub stored_entries: usize,
    pub entries_per_level: Vec<usize>,
    /// `ranks[ℓ][τ·F + ν]` for butterfly levels `0..=L`.
    pub ranks: Vec<Vec<usize>>,
    /// Peak over the run of stored + live propagated factors + live band, in bytes.
    pub peak_bytes: usize,
    /// Peak of live propagated factors + live band alone, in bytes.
    pub peak_working_bytes: usize,
    /// Largest band requested from the provider, in bytes.
    pub max_band_bytes: usize,
    pub bands_requested: usize,
    /// Peak of factors parked on disk, in bytes; zero without spilling.
    pub peak_spilled_bytes: usize,
}

impl BuildStats {
    pub fn final_bytes(&self) -> usize {
        self.stored_entries * ENTRY_BYTES
    }

    pub fn memory_report(&self) -> MemoryReport {
        build_report(
            self.rows,
            self.cols,
            self.depth,
            self.tol,
            self.entries_per_level.clone(),
            self.ranks.clone(),
        )
    }
}

fn build_report(
    rows: usize,
    cols: usize,
    depth: usize,
    tol: f64,
    entries_per_level: Vec<usize>,
    ranks: Vec<Vec<usize>>,
) -> MemoryReport {
    let stored: usize = entries_per_level.iter().sum();
    let dense = rows * cols;
    MemoryReport {
        rows,
        cols,
        depth,
        tol,
        stored_entries: stored,
        total_bytes: stored * ENTRY_BYTES,
        max_rank: ranks.iter().flatten().copied().max().unwrap_or(0),
        entries_per_level,
        ranks,
        dense_entries: dense,
        compression_factor: if stored > 0 {
            dense as f64 / stored as f64
        } else {
            f64::INFINITY
        },
    }
}

struct Tracker {
    stored: usize,
    live: usize,
    peak: usize,
    peak_working: usize,
    max_band: usize,
    bands: usize,
    spilled: usize,
    peak_spilled: usize,
    entries_per_level: Vec<usize>,
    ranks: Vec<Vec<usize>>,
}

impl Tracker {
    fn new(space: &IndexTree, freq: &IndexTree) -> Self {
        let l = space.depth();
        Self {
            stored: 0,
            live: 0,
            peak: 0,
            peak_working: 0,
            max_band: 0,
            bands: 0,
            spilled: 0,
            peak_spilled: 0,
            entries_per_level: vec![0; l + 2],
            ranks: (0..=l)
                .map(|lv| vec![0; space.level_len(lv) * freq.level_len(l - lv)])
                .collect(),
        }
    }

    fn alloc(&mut self, entries: usize) {
        self.live += entries;
        self.peak = self.peak.max(self.live + self.stored);
        self.peak_working = self.peak_working.max(self.live);
    }

    fn free(&mut self, entries: usize) {
        self.live -= entries;
    }

    fn spill(&mut self, entries: usize) {
        self.free(entries);
        self.spilled += entries;
        self.peak_spilled = self.peak_spilled.max(self.spilled);
    }

    fn unspill(&mut self, entries: usize) {
        self.spilled -= entries;
        self.alloc(entries);
    }

    fn store(&mut self, level: usize, entries: usize) {
        self.stored += entries;
        self.entries_per_level[level] += entries;
        self.peak = self.peak.max(self.live + self.stored);
    }

    fn stats(self, n: usize, m: usize, depth: usize, tol: f64) -> BuildStats {
        BuildStats {
            rows: n,
            cols: m,
            depth,
            tol,
            stored_entries: self.stored,
            entries_per_level: self.entries_per_level,
            ranks: self.ranks,
            peak_bytes: self.peak * ENTRY_BYTES,
            peak_working_bytes: self.peak_working * ENTRY_BYTES,
            max_band_bytes: self.max_band * ENTRY_BYTES,
            bands_requested: self.bands,
            peak_spilled_bytes: self.peak_spilled * ENTRY_BYTES,
        }
    }
}

/// Shared state of a build: trees, row positions of each space node inside
/// its parent, and options.
struct Plan<'a> {
    space: &'a IndexTree,
    freq: &'a IndexTree,
    depth: usize,
    in_parent: Vec<Vec<Vec<usize>>>,
    opts: ButterflyOptions,
}

impl<'a> Plan<'a> {
    fn new(space: &'a IndexTree, freq: &'a IndexTree, opts: ButterflyOptions) -> Self {
        let depth = space.depth();
        let mut in_parent = vec![Vec::new()];
        for d in 1..=depth {
            in_parent.push(
                map_range(opts.execution, space.level_len(d), |t| space.positions_in_parent(d, t)),
            );
        }
        Self {
            space,
            freq,
            depth,
            in_parent,
            opts,
        }
    }

    /// Merges the propagated factors of the children of frequency node
    /// `nu` (depth `L − level`), given per child as factors over every space
    /// node at depth `level − 1`. Returns `(A_{τν}, R_{τν})` for every `τ`
    /// at depth `level`.
    fn merge(
        &self,
        level: usize,
        children: &[Vec<DenseMatrix>],
    ) -> Result<Vec<(DenseMatrix, DenseMatrix)>> {
        let rows = &self.in_parent[level];
        try_map_range(self.opts.execution, self.space.level_len(level), |t| {
            let p = self.space.parent(t);
            let parts: Vec<&DenseMatrix> = children.iter().map(|c| &c[p]).collect();
            let stacked = stack_restricted(&parts, &rows[t]);
            let c = compress_block(&stacked, self.opts.tol)?;
            Ok((c.left, c.right))
        })
    }

    fn compress_band(&self, band: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let c = compress_block(band, self.opts.tol)?;
        Ok((c.left, c.right))
    }
}

/// `[A_1(rows,:) … A_k(rows,:)]`.
fn stack_restricted(parts: &[&DenseMatrix], rows: &[usize]) -> DenseMatrix {
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for p in parts {
        for j in 0..p.cols() {
            let col = p.col(j);
            data.extend(rows.iter().map(|&i| col[i]));
        }
    }
    DenseMatrix::from_raw(rows.len(), cols, data)
}

/// Level-by-level factorization of an in-memory matrix.
pub fn butterfly_factor(
    phi: &DenseMatrix,
    space: &IndexTree,
    freq: &IndexTree,
    tol: f64,
) -> Result<ButterflyFactor> {
    butterfly_factor_with(phi, space, freq, &ButterflyOptions::new(tol))
}

pub fn butterfly_factor_with(
    phi: &DenseMatrix,
    space: &IndexTree,
    freq: &IndexTree,
    opts: &ButterflyOptions,
) -> Result<ButterflyFactor> {
    check_tol(opts.tol)?;
    check_trees(space, freq, phi.rows(), phi.cols())?;
    if !phi.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let plan = Plan::new(space, freq, *opts);
    let l = plan.depth;
    let mut sink = StoringSink::new(space, freq);

    let leaves = freq.leaves();
    let mut lefts: Vec<Vec<DenseMatrix>> = try_map_range(opts.execution, leaves.len(), |nu| {
        let band = phi.select_columns(&leaves[nu])?;
        plan.compress_band(&band)
    })?
    .into_iter()
    .enumerate()
    .map(|(nu, (left, v))| {
        sink.accept(0, 0, nu, v)?;
        Ok(vec![left])
    })
    .collect::<Result<_>>()?;

    for level in 1..=l {
        let fd = l - level;
        let af = freq.arity();
        let merged = try_map_range(Execution::Sequential, freq.level_len(fd), |nu| {
            plan.merge(level, &lefts[af * nu..af * nu + af])
        })?;
        lefts = Vec::with_capacity(merged.len());
        for (nu, blocks) in merged.into_iter().enumerate() {
            let mut row = Vec::with_capacity(blocks.len());
            for (tau, (left, r)) in blocks.into_iter().enumerate() {
                sink.accept(level, tau, nu, r)?;
                row.push(left);
            }
            lefts.push(row);
        }
    }
    let finals = lefts.pop().unwrap_or_default();
    for (tau, u) in finals.into_iter().enumerate() {
        sink.accept(l + 1, tau, 0, u)?;
    }
    sink.finish(space.clone(), freq.clone(), opts.tol)
}

/// Post-order streaming factorization that keeps every factor.
pub fn butterfly_factor_streaming<P: ColumnBandProvider + ?Sized>(
    provider: &mut P,
    space: &IndexTree,
    freq: &IndexTree,
    tol: f64,
) -> Result<ButterflyFactor> {
    butterfly_factor_streaming_with(provider, space, freq, &ButterflyOptions::new(tol)).map(|r| r.0)
}

pub fn butterfly_factor_streaming_with<P: ColumnBandProvider + ?Sized>(
    provider: &mut P,
    space: &IndexTree,
    freq: &IndexTree,
    opts: &ButterflyOptions,
) -> Result<(ButterflyFactor, BuildStats)> {
    let mut sink = StoringSink::new(space, freq);
    let stats = stream_into(provider, space, freq, opts, &mut sink)?;
    Ok((sink.finish(space.clone(), freq.clone(), opts.tol)?, stats))
}

/// Streaming factorization that hands every factor to `sink` as soon as it
/// is final.
///
/// The frequency tree is visited in post-order (children left to right, then
/// the parent). A leaf pulls its band from `provider` and compresses it; an
/// internal node merges its children's propagated factors and releases them.
/// At most one band is alive at a time, and pending factors are limited to
/// the completed siblings along the current root path.
pub fn stream_into<P: ColumnBandProvider + ?Sized, S: FactorSink + ?Sized>(
    provider: &mut P,
    space: &IndexTree,
    freq: &IndexTree,
    opts: &ButterflyOptions,
    sink: &mut S,
) -> Result<BuildStats> {
    check_tol(opts.tol)?;
    check_trees(space, freq, provider.rows(), provider.cols())
        .map_err(|e| Error::Stream(e.to_string()))?;
    let plan = Plan::new(space, freq, *opts);
    let mut tracker = Tracker::new(space, freq);
    let l = plan.depth;
    let finals = visit(&plan, provider, sink, &mut tracker, 0, 0)?;
    for (tau, u) in finals.into_iter().enumerate() {
        tracker.store(l + 1, u.len());
        tracker.free(u.len());
        sink.accept(l + 1, tau, 0, u)?;
    }
    Ok(tracker.stats(space.size(), freq.size(), l, opts.tol))
}

enum Pending {
    Memory(Vec<DenseMatrix>),
    Disk(File, usize),
}

/// Writes factors to an anonymous temporary file, bit for bit.
fn park(mats: &[DenseMatrix]) -> Result<File> {
    let mut w = BufWriter::new(tempfile::tempfile()?);
    w.write_all(&(mats.len() as u64).to_le_bytes())?;
    for m in mats {
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for z in m.data() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    let mut file = w.into_inner().map_err(|e| e.into_error())?;
    file.seek(SeekFrom::Start(0))?;
    Ok(file)
}

fn unpark(file: File) -> Result<Vec<DenseMatrix>> {
    let mut r = BufReader::new(file);
    let mut u = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut u)?;
        Ok(u64::from_le_bytes(u))
    };
    let count = next(&mut r)? as usize;
    let mut mats = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = next(&mut r)? as usize;
        let cols = next(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let re = f64::from_bits(next(&mut r)?);
            let im = f64::from_bits(next(&mut r)?);
            data.push(C64::new(re, im));
        }
        mats.push(DenseMatrix::from_raw(rows, cols, data));
    }
    Ok(mats)
}

fn visit<P: ColumnBandProvider + ?Sized, S: FactorSink + ?Sized>(
    plan: &Plan,
    provider: &mut P,
    sink: &mut S,
    tracker: &mut Tracker,
    fd: usize,
    nu: usize,
) -> Result<Vec<DenseMatrix>> {
    let l = plan.depth;
    let level = l - fd;
    if fd == l {
        let cols = plan.freq.indices(fd, nu);
        let band = provider.band(cols)?;
        if band.rows() != provider.rows() || band.cols() != cols.len() {
            return Err(Error::Stream(format!(
                "provider returned a {}x{} band for {} columns",
                band.rows(),
                band.cols(),
                cols.len()
            )));
        }
        if !band.is_finite() {
            return Err(Error::Stream("provider returned non-finite entries".into()));
        }
        tracker.bands += 1;
        tracker.max_band = tracker.max_band.max(band.len());
        tracker.alloc(band.len());
        let (left, v) = plan.compress_band(&band)?;
        tracker.alloc(left.len());
        tracker.free(band.len());
        drop(band);
        tracker.ranks[0][nu] = v.cols();
        tracker.store(0, v.len());
        sink.accept(0, 0, nu, v)?;
        return Ok(vec![left]);
    }
    let af = plan.freq.arity();
    let mut pending = Vec::with_capacity(af);
    let last = plan.freq.children(nu).end - 1;
    for c in plan.freq.children(nu) {
        let lefts = visit(plan, provider, sink, tracker, fd + 1, c)?;
        if plan.opts.spill && c != last {
            let entries = lefts.iter().map(DenseMatrix::len).sum();
            pending.push(Pending::Disk(park(&lefts)?, entries));
            tracker.spill(entries);
        } else {
            pending.push(Pending::Memory(lefts));
        }
    }
    let mut children = Vec::with_capacity(af);
    for p in pending {
        children.push(match p {
            Pending::Memory(lefts) => lefts,
            Pending::Disk(file, entries) => {
                tracker.unspill(entries);
                unpark(file)?
            }
        });
    }
    let merged = plan.merge(level, &children)?;
    let nf = plan.freq.level_len(fd);
    let mut lefts = Vec::with_capacity(merged.len());
    for (tau, (left, r)) in merged.into_iter().enumerate() {
        tracker.alloc(left.len());
        tracker.ranks[level][tau * nf + nu] = r.cols();
        tracker.store(level, r.len());
        sink.accept(level, tau, nu, r)?;
        lefts.push(left);
    }
    let released: usize = children.iter().flatten().map(DenseMatrix::len).sum();
    drop(children);
    tracker.free(released);
    Ok(lefts)
}

impl ButterflyFactor {
    pub fn rows(&self) -> usize {
        self.space.size()
    }

    pub fn cols(&self) -> usize {
        self.freq.size()
    }

    pub fn depth(&self) -> usize {
        self.space.depth()
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn space_tree(&self) -> &IndexTree {
        &self.space
    }

    pub fn freq_tree(&self) -> &IndexTree {
        &self.freq
    }

    pub fn row_bases(&self) -> &[DenseMatrix] {
        &self.row_bases
    }

    pub fn transfers(&self, level: usize) -> &[DenseMatrix] {
        &self.transfers[level - 1]
    }

    pub fn col_bases(&self) -> &[DenseMatrix] {
        &self.col_bases
    }

    fn nf(&self, level: usize) -> usize {
        self.freq.level_len(self.depth() - level)
    }

    /// `ranks[ℓ][τ·F + ν]` for butterfly levels `0..=L`.
    pub fn ranks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![self.row_bases.iter().map(DenseMatrix::cols).collect()];
        for t in &self.transfers {
            out.push(t.iter().map(DenseMatrix::cols).collect());
        }
        out
    }

    pub fn stored_entries(&self) -> usize {
        self.entries_per_level().iter().sum()
    }

    fn entries_per_level(&self) -> Vec<usize> {
        let mut v = vec![self.row_bases.iter().map(DenseMatrix::len).sum()];
        v.extend(self.transfers.iter().map(|t| t.iter().map(DenseMatrix::len).sum::<usize>()));
        v.push(self.col_bases.iter().map(DenseMatrix::len).sum());
        v
    }

    /// Checks that every factor's shape chains with its neighbours.
    pub fn validate(&self) -> Result<()> {
        let l = self.depth();
        let bad = |what: String| Err(Error::Format(what));
        if self.row_bases.len() != self.freq.level_len(l) {
            return bad("wrong number of row bases".into());
        }
        for (nu, v) in self.row_bases.iter().enumerate() {
            if v.rows() != self.freq.indices(l, nu).len() {
                return bad(format!("row basis {nu} has {} rows", v.rows()));
            }
        }
        if self.transfers.len() != l {
            return bad("wrong number of transfer levels".into());
        }
        let af = self.freq.arity();
        let mut prev = self.ranks()[0].clone();
        for level in 1..=l {
            let nf = self.nf(level);
            let nf_prev = self.nf(level - 1);
            let level_t = &self.transfers[level - 1];
            if level_t.len() != self.space.level_len(level) * nf {
                return bad(format!("level {level} has {} blocks", level_t.len()));
            }
            for tau in 0..self.space.level_len(level) {
                let p = self.space.parent(tau);
                for nu in 0..nf {
                    let expect: usize = (0..af).map(|i| prev[p * nf_prev + af * nu + i]).sum();
                    let r = &level_t[tau * nf + nu];
                    if r.rows() != expect {
                        return bad(format!(
                            "transfer ({level}, {tau}, {nu}) has {} rows, children ranks sum to {expect}",
                            r.rows()
                        ));
                    }
                }
            }
            prev = level_t.iter().map(DenseMatrix::cols).collect();
        }
        if self.col_bases.len() != self.space.level_len(l) {
            return bad("wrong number of column bases".into());
        }
        for (tau, u) in self.col_bases.iter().enumerate() {
            if u.rows() != self.space.indices(l, tau).len() || u.cols() != prev[tau] {
                return bad(format!("column basis {tau} has shape {}x{}", u.rows(), u.cols()));
            }
        }
        Ok(())
    }
}

/// `y ≈ Φc`.
pub fn bf_apply(bf: &ButterflyFactor, c: &[C64]) -> Result<Vec<C64>> {
    bf_apply_with(bf, c, Execution::default())
}

pub fn bf_apply_with(bf: &ButterflyFactor, c: &[C64], exec: Execution) -> Result<Vec<C64>> {
    if c.len() != bf.cols() {
        return Err(Error::Shape(format!(
            "{} coefficients for a factorization with {} columns",
            c.len(),
            bf.cols()
        )));
    }
    let l = bf.depth();
    let leaves = bf.freq.leaves();
    let mut coeffs: Vec<Vec<C64>> = map_range(exec, leaves.len(), |nu| {
        let x: Vec<C64> = leaves[nu].iter().map(|&k| c[k]).collect();
        let mut out = vec![C64::new(0.0, 0.0); bf.row_bases[nu].cols()];
        bf.row_bases[nu].adjoint_matvec_into(&x, &mut out);
        out
    });
    let af = bf.freq.arity();
    for level in 1..=l {
        let nf = bf.nf(level);
        let nf_prev = bf.nf(level - 1);
        let transfers = &bf.transfers[level - 1];
        coeffs = map_range(exec, transfers.len(), |b| {
            let (tau, nu) = (b / nf, b % nf);
            let p = bf.space.parent(tau);
            let mut x = Vec::with_capacity(transfers[b].rows());
            for i in 0..af {
                x.extend_from_slice(&coeffs[p * nf_prev + af * nu + i]);
            }
            let mut out = vec![C64::new(0.0, 0.0); transfers[b].cols()];
            transfers[b].adjoint_matvec_into(&x, &mut out);
            out
        });
    }
    let pieces = map_range(exec, bf.col_bases.len(), |tau| {
        let mut y = vec![C64::new(0.0, 0.0); bf.col_bases[tau].rows()];
        bf.col_bases[tau].matvec_into(&coeffs[tau], &mut y);
        y
    });
    let mut y = vec![C64::new(0.0, 0.0); bf.rows()];
    for (tau, piece) in pieces.into_iter().enumerate() {
        for (&j, v) in bf.space.indices(l, tau).iter().zip(piece) {
            y[j] = v;
        }
    }
    Ok(y)
}

/// `c ≈ Φ^* y`.
pub fn bf_apply_adjoint(bf: &ButterflyFactor, y: &[C64]) -> Result<Vec<C64>> {
    bf_apply_adjoint_with(bf, y, Execution::default())
}

pub fn bf_apply_adjoint_with(bf: &ButterflyFactor, y: &[C64], exec: Execution) -> Result<Vec<C64>> {
    if y.len() != bf.rows() {
        return Err(Error::Shape(format!(
            "{} values for a factorization with {} rows",
            y.len(),
            bf.rows()
        )));
    }
    let l = bf.depth();
    let mut coeffs: Vec<Vec<C64>> = map_range(exec, bf.col_bases.len(), |tau| {
        let u = &bf.col_bases[tau];
        let x: Vec<C64> = bf.space.indices(l, tau).iter().map(|&j| y[j]).collect();
        let mut out = vec![C64::new(0.0, 0.0); u.cols()];
        u.adjoint_matvec_into(&x, &mut out);
        out
    });
    let af = bf.freq.arity();
    let as_ = bf.space.arity();
    for level in (1..=l).rev() {
        let nf = bf.nf(level);
        let nf_prev = bf.nf(level - 1);
        let transfers = &bf.transfers[level - 1];
        let expanded: Vec<Vec<C64>> = map_range(exec, transfers.len(), |b| {
            let mut out = vec![C64::new(0.0, 0.0); transfers[b].rows()];
            transfers[b].matvec_into(&coeffs[b], &mut out);
            out
        });
        let prev_ranks: Vec<usize> = if level == 1 {
            bf.row_bases.iter().map(DenseMatrix::cols).collect()
        } else {
            bf.transfers[level - 2].iter().map(DenseMatrix::cols).collect()
        };
        coeffs = map_range(exec, prev_ranks.len(), |b| {
            let (p, child) = (b / nf_prev, b % nf_prev);
            let (nu, i) = (child / af, child % af);
            let offset: usize = (0..i).map(|k| prev_ranks[p * nf_prev + af * nu + k]).sum();
            let mut acc = vec![C64::new(0.0, 0.0); prev_ranks[b]];
            for tau in as_ * p..as_ * p + as_ {
                let e = &expanded[tau * nf + nu];
                for (a, v) in acc.iter_mut().zip(&e[offset..offset + prev_ranks[b]]) {
                    *a += v;
                }
            }
            acc
        });
    }
    let leaves = bf.freq.leaves();
    let pieces = map_range(exec, leaves.len(), |nu| {
        let mut out = vec![C64::new(0.0, 0.0); bf.row_bases[nu].rows()];
        bf.row_bases[nu].matvec_into(&coeffs[nu], &mut out);
        out
    });
    let mut c = vec![C64::new(0.0, 0.0); bf.cols()];
    for (nu, piece) in pieces.into_iter().enumerate() {
        for (&k, v) in leaves[nu].iter().zip(piece) {
            c[k] = v;
        }
    }
    Ok(c)
}

/// Spectral norm estimate from `iters` power iterations on `Φ^*Φ`.
pub fn norm_estimate(bf: &ButterflyFactor, iters: usize, seed: u64) -> Result<f64> {
    let m = bf.cols();
    if m == 0 || bf.rows() == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<C64> = (0..m)
        .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect();
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let nx = l2(&x);
        if nx == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let y = bf_apply(bf, &x)?;
        est = l2(&y);
        x = bf_apply_adjoint(bf, &y)?;
    }
    Ok(est)
}

fn l2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Exact storage accounting from the stored factors.
pub fn memory_report(bf: &ButterflyFactor) -> MemoryReport {
    build_report(
        bf.rows(),
        bf.cols(),
        bf.depth(),
        bf.tol,
        bf.entries_per_level(),
        bf.ranks(),
    )
}

const MAGIC: &[u8; 6] = b"BFMHT1";

fn write_u64<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("length overflows usize".into()))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_block<W: Write>(w: &mut W, tau_id: usize, nu_id: usize, m: &DenseMatrix) -> Result<()> {
    write_u64(w, tau_id)?;
    write_u64(w, nu_id)?;
    write_u64(w, m.rows())?;
    write_u64(w, m.cols())?;
    let mut buf = Vec::with_capacity(m.len() * 16);
    for z in m.data() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R, tau_id: usize, nu_id: usize) -> Result<DenseMatrix> {
    let (t, v) = (read_u64(r)?, read_u64(r)?);
    if (t, v) != (tau_id, nu_id) {
        return Err(Error::Format(format!(
            "expected block ({tau_id}, {nu_id}), found ({t}, {v})"
        )));
    }
    let (rows, cols) = (read_u64(r)?, read_u64(r)?);
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("block dimensions overflow".into()))?;
    let mut bytes = vec![0u8; len.checked_mul(16).ok_or_else(|| Error::Format("block too large".into()))?];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(16)
        .map(|c| {
            C64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    DenseMatrix::from_column_major(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

impl ButterflyFactor {
    /// Binary container: magic `BFMHT1`, `ε`, the two trees as
    /// length-prefixed JSON, then for each level (row bases, transfer
    /// levels `1..=L`, column bases) a block count and the blocks as
    /// `{τ id, ν id, rows, cols}` followed by interleaved `re, im` values.
    /// Integers are little-endian u64, floats little-endian f64.
    pub fn write_bfc<W: Write>(&self, mut w: W) -> Result<()> {
        let l = self.depth();
        w.write_all(MAGIC)?;
        w.write_all(&self.tol.to_le_bytes())?;
        for tree in [&self.space, &self.freq] {
            let json = tree.to_json()?;
            write_u64(&mut w, json.len())?;
            w.write_all(json.as_bytes())?;
        }
        write_u64(&mut w, self.row_bases.len())?;
        for (nu, v) in self.row_bases.iter().enumerate() {
            write_block(&mut w, self.space.node_id(0, 0), self.freq.node_id(l, nu), v)?;
        }
        for level in 1..=l {
            let nf = self.nf(level);
            let t = &self.transfers[level - 1];
            write_u64(&mut w, t.len())?;
            for (b, r) in t.iter().enumerate() {
                let (tau, nu) = (b / nf, b % nf);
                write_block(
                    &mut w,
                    self.space.node_id(level, tau),
                    self.freq.node_id(l - level, nu),
                    r,
                )?;
            }
        }
        write_u64(&mut w, self.col_bases.len())?;
        for (tau, u) in self.col_bases.iter().enumerate() {
            write_block(&mut w, self.space.node_id(l, tau), self.freq.node_id(0, 0), u)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_bfc<R: Read>(mut r: R) -> Result<ButterflyFactor> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a BFC container".into()));
        }
        let tol = read_f64(&mut r)?;
        let mut trees = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = read_u64(&mut r)?;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let s = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            trees.push(IndexTree::from_json(&s)?);
        }
        let freq = trees.pop().unwrap();
        let space = trees.pop().unwrap();
        if space.depth() != freq.depth() {
            return Err(Error::Format("tree depths differ".into()));
        }
        let l = space.depth();
        let expect_count = |r: &mut R, n: usize| -> Result<()> {
            let c = read_u64(r)?;
            if c != n {
                return Err(Error::Format(format!("expected {n} blocks, found {c}")));
            }
            Ok(())
        };
        expect_count(&mut r, freq.level_len(l))?;
        let row_bases = (0..freq.level_len(l))
            .map(|nu| read_block(&mut r, space.node_id(0, 0), freq.node_id(l, nu)))
            .collect::<Result<Vec<_>>>()?;
        let mut transfers = Vec::with_capacity(l);
        for level in 1..=l {
            let nf = freq.level_len(l - level);
            let count = space.level_len(level) * nf;
            expect_count(&mut r, count)?;
            transfers.push(
                (0..count)
                    .map(|b| {
                        read_block(&mut r, space.node_id(level, b / nf), freq.node_id(l - level, b % nf))
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        expect_count(&mut r, space.level_len(l))?;
        let col_bases = (0..space.level_len(l))
            .map(|tau| read_block(&mut r, space.node_id(l, tau), freq.node_id(0, 0)))
            .collect::<Result<Vec<_>>>()?;
        let bf = ButterflyFactor {
            space,
            freq,
            tol,
            row_bases,
            transfers,
            col_bases,
        };
        bf.validate()?;
        Ok(bf)
    }
}
