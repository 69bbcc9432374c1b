//! Backward least-squares fit of an approximate Doob martingale.
//!
//! Each exercise interval `[T_n, T_{n+1}]` is split into `Nbar` sub-ticks. The
//! elementary increment indexed by `(j, p, k)` is
//!
//! ```text
//! 1{S^k_{t_{n,j}} in cell p} * (A^k_{t_{n,j+1}} - A^k_{t_{n,j}}),   A^k_t = e^{(delta_k - r) t} S^k_t
//! ```
//!
//! each with zero conditional mean. With [`SubtickLayout::Shared`] the
//! sub-tick increments of a given `(p, k)` add up to one process `X^{p,k}` and
//! an interval carries `L = P * d` increments; with
//! [`SubtickLayout::PerSubtick`] every `(j, p, k)` gets its own coefficient and
//! `L = P * d * Nbar`.
//!
//! Going backward from `n = N - 1`, the coefficients `alpha_{n+1}` regress
//! `max_{n+1 <= j <= N} (Z_j - sum_{i=n+2}^{j} alpha_i . dX_i) - Z_n` on
//! `dX_{n+1}`. Subtracting `Z_n` leaves the population solution unchanged
//! (`E[dX_{n+1} | F_n] = 0`) and removes most of the sampling noise.
//! The fitted martingale is `M_n = sum_{l=1}^{n} alpha_l . dX_l`.
//!
//! # Coefficient file layout
//!
//! All integers and floats are little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic `BDMG` | 4 bytes |
//! | format version (= 1) | u32 |
//! | d, N, Nbar, P | 4 x u32 |
//! | layout (0 = shared, 1 = per sub-tick) | u32 |
//! | maturity, rate | 2 x f64 |
//! | dividend yields | d x f64 |
//! | fit seed, fit path count | 2 x u64 |
//! | breakpoints, for each fine time `f < N * Nbar` then asset `k` | u32 count, then count x f64 |
//! | alpha, in `(n, p, k)` or `(n, j, p, k)` order | N * L x f64 |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::market::{PathBatch, PayoffMatrix};
use crate::regression::{GramAccumulator, LocalBasis};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BDMG";
const FORMAT_VERSION: u32 = 1;
const FIT_CHUNK: usize = 8192;
const FIT_WINDOW: usize = 8;

/// How increment coefficients are attached to sub-ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtickLayout {
    /// One coefficient per `(p, k)`, common to all sub-ticks of an interval.
    #[default]
    Shared,
    /// One coefficient per `(j, p, k)`.
    PerSubtick,
}

/// Local bases at every sub-tick start time, one per fine-grid time `t_{i,j}`, `j < Nbar`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBasis {
    bins: usize,
    dim: usize,
    intervals: usize,
    subticks: usize,
    layout: SubtickLayout,
    locals: Vec<LocalBasis>,
}

impl IncrementBasis {
    /// Quantile cells fitted per fine time and coordinate on `paths`.
    /// Coordinates that are constant across paths (e.g. at `t = 0`) get a single cell.
    pub fn from_paths(paths: &PathBatch, bins: usize, layout: SubtickLayout) -> Result<Self> {
        if bins == 0 {
            return Err(Error::DegenerateSamples("need at least one bin".into()));
        }
        let model = paths.model();
        let d = paths.dim();
        let fine = model.exercise_dates * model.subticks;
        let locals = (0..fine)
            .into_par_iter()
            .map(|f| {
                let mut breakpoints = Vec::with_capacity(d);
                for k in 0..d {
                    let column: Vec<f64> = (0..paths.len()).map(|p| paths.state(p, f)[k]).collect();
                    match LocalBasis::from_samples(&column, 1, bins) {
                        Ok(b) => breakpoints.push(b.breakpoints()[0].clone()),
                        Err(Error::DegenerateSamples(_)) => breakpoints.push(Vec::new()),
                        Err(e) => return Err(e),
                    }
                }
                LocalBasis::from_breakpoints(bins, breakpoints)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bins,
            dim: d,
            intervals: model.exercise_dates,
            subticks: model.subticks,
            layout,
            locals,
        })
    }

    /// Explicit bases, indexed by fine time `f = n * Nbar + j`.
    pub fn new(intervals: usize, subticks: usize, layout: SubtickLayout, locals: Vec<LocalBasis>) -> Result<Self> {
        if locals.len() != intervals * subticks || locals.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "increment basis",
                expected: intervals * subticks,
                actual: locals.len(),
            });
        }
        let bins = locals[0].bins();
        let dim = locals[0].breakpoints().len();
        if locals.iter().any(|l| l.bins() != bins || l.breakpoints().len() != dim) {
            return Err(Error::GridMismatch("local bases disagree on bins or dimension".into()));
        }
        Ok(Self {
            bins,
            dim,
            intervals,
            subticks,
            layout,
            locals,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn subticks(&self) -> usize {
        self.subticks
    }

    pub fn layout(&self) -> SubtickLayout {
        self.layout
    }

    /// Increments per exercise interval, `P * d` or `P * d * Nbar`.
    pub fn len(&self) -> usize {
        match self.layout {
            SubtickLayout::Shared => self.bins * self.dim,
            SubtickLayout::PerSubtick => self.bins * self.dim * self.subticks,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn local(&self, f: usize) -> &LocalBasis {
        &self.locals[f]
    }

    /// Position of increment `(j, p, k)` inside an interval's coefficient vector.
    #[inline]
    pub fn index(&self, j: usize, p: usize, k: usize) -> usize {
        match self.layout {
            SubtickLayout::Shared => p * self.dim + k,
            SubtickLayout::PerSubtick => (j * self.bins + p) * self.dim + k,
        }
    }

    fn check_paths(&self, paths: &PathBatch) -> Result<()> {
        let model = paths.model();
        if model.exercise_dates != self.intervals || model.subticks != self.subticks || paths.dim() != self.dim {
            return Err(Error::GridMismatch(format!(
                "basis has (N, Nbar, d) = ({}, {}, {}), paths have ({}, {}, {})",
                self.intervals,
                self.subticks,
                self.dim,
                model.exercise_dates,
                model.subticks,
                paths.dim()
            )));
        }
        Ok(())
    }

    /// Entries of `dX_{n+1}` for one path; with the shared layout an index
    /// may appear once per sub-tick and the entries add up.
    fn sparse_increments(&self, paths: &PathBatch, path: usize, n: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        for j in 0..self.subticks {
            let f = n * self.subticks + j;
            let local = &self.locals[f];
            let state = paths.state(path, f);
            for (k, &s) in state.iter().enumerate() {
                let p = local.cell(k, s);
                let da = paths.tradable(path, f + 1, k) - paths.tradable(path, f, k);
                out.push((self.index(j, p, k), da));
            }
        }
    }
}

/// Dense `dX_{n+1}` for every path (rows of length `L`), over the interval `[T_n, T_{n+1}]`.
pub fn elementary_increments(paths: &PathBatch, basis: &IncrementBasis, n: usize) -> Result<Vec<f64>> {
    basis.check_paths(paths)?;
    if n >= basis.intervals {
        return Err(Error::GridMismatch(format!("interval {n} out of range 0..{}", basis.intervals)));
    }
    let l = basis.len();
    let mut out = vec![0.0; paths.len() * l];
    let mut entries = Vec::new();
    for p in 0..paths.len() {
        basis.sparse_increments(paths, p, n, &mut entries);
        for &(i, v) in &entries {
            out[p * l + i] += v;
        }
    }
    Ok(out)
}

/// Grid and provenance the coefficients were fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFingerprint {
    pub dim: usize,
    pub intervals: usize,
    pub subticks: usize,
    pub maturity: f64,
    pub rate: f64,
    pub dividends: Vec<f64>,
    pub fit_seed: u64,
    pub fit_paths: u64,
}

impl GridFingerprint {
    fn of(paths: &PathBatch) -> Self {
        let model = paths.model();
        Self {
            dim: model.dim(),
            intervals: model.exercise_dates,
            subticks: model.subticks,
            maturity: model.maturity,
            rate: model.rate,
            dividends: (0..model.dim()).map(|k| model.dividend(k)).collect(),
            fit_seed: paths.seed(),
            fit_paths: paths.len() as u64,
        }
    }

    /// Whether `paths` live on the same grid with the same discounting.
    pub fn check(&self, paths: &PathBatch) -> Result<()> {
        let other = Self::of(paths);
        let same = self.dim == other.dim
            && self.intervals == other.intervals
            && self.subticks == other.subticks
            && self.maturity.to_bits() == other.maturity.to_bits()
            && self.rate.to_bits() == other.rate.to_bits()
            && self.dividends.iter().zip(&other.dividends).all(|(a, b)| a.to_bits() == b.to_bits());
        if same {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "martingale fitted on (d, N, Nbar, T, r) = ({}, {}, {}, {}, {}), paths have ({}, {}, {}, {}, {})",
                self.dim,
                self.intervals,
                self.subticks,
                self.maturity,
                self.rate,
                other.dim,
                other.intervals,
                other.subticks,
                other.maturity,
                other.rate
            )))
        }
    }
}

/// Fitted coefficients `alpha_1..alpha_N` and the basis they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMartingale {
    basis: IncrementBasis,
    alpha: Vec<Vec<f64>>,
    grid: GridFingerprint,
}

impl DualMartingale {
    pub fn basis(&self) -> &IncrementBasis {
        &self.basis
    }

    /// `alpha_n` for `n` in `1..=N`.
    pub fn alpha(&self, n: usize) -> &[f64] {
        &self.alpha[n - 1]
    }

    pub fn grid(&self) -> &GridFingerprint {
        &self.grid
    }

    /// A martingale with the given coefficients, for paths on the grid of `paths`.
    pub fn from_parts(basis: IncrementBasis, alpha: Vec<Vec<f64>>, paths: &PathBatch) -> Result<Self> {
        basis.check_paths(paths)?;
        if alpha.len() != basis.intervals || alpha.iter().any(|a| a.len() != basis.len()) {
            return Err(Error::DimensionMismatch {
                context: "martingale coefficients",
                expected: basis.intervals * basis.len(),
                actual: alpha.iter().map(Vec::len).sum(),
            });
        }
        if alpha.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("martingale coefficients"));
        }
        Ok(Self {
            basis,
            alpha,
            grid: GridFingerprint::of(paths),
        })
    }
}

/// Runs the backward least-squares recursion on the fitting sample.
pub fn fit_dual_coefficients(paths: &PathBatch, z: &PayoffMatrix, basis: IncrementBasis) -> Result<DualMartingale> {
    basis.check_paths(paths)?;
    let q = paths.len();
    let big_n = basis.intervals;
    if z.len() != q || z.intervals() != big_n {
        return Err(Error::DimensionMismatch {
            context: "payoffs for martingale fit",
            expected: q,
            actual: z.len(),
        });
    }
    let l = basis.len();
    let per_path = basis.subticks * basis.dim;

    // running[p] = max_{n+1 <= j <= N} (Z_j - sum_{i=n+2}^{j} alpha_i . dX_i)
    let mut running: Vec<f64> = (0..q).map(|p| z.get(p, big_n)).collect();
    let mut alpha = vec![Vec::new(); big_n];
    let mut increments = vec![(0usize, 0.0f64); q * per_path];

    for n in (0..big_n).rev() {
        increments.par_chunks_mut(per_path).enumerate().for_each_init(Vec::new, |buf, (p, slot)| {
            basis.sparse_increments(paths, p, n, buf);
            slot.copy_from_slice(buf);
        });

        let chunk_starts: Vec<usize> = (0..q).step_by(FIT_CHUNK).collect();
        let mut gram = GramAccumulator::new(l);
        for window in chunk_starts.chunks(FIT_WINDOW) {
            let partials: Vec<GramAccumulator> = window
                .par_iter()
                .map(|&start| {
                    let mut acc = GramAccumulator::new(l);
                    for p in start..(start + FIT_CHUNK).min(q) {
                        acc.add_sparse(&increments[p * per_path..(p + 1) * per_path], running[p] - z.get(p, n));
                    }
                    acc
                })
                .collect();
            for part in &partials {
                gram.merge(part);
            }
        }
        let coefficients = gram.solve()?.coefficients;

        running.par_iter_mut().enumerate().for_each(|(p, r)| {
            let hedge: f64 = increments[p * per_path..(p + 1) * per_path]
                .iter()
                .map(|&(i, v)| coefficients[i] * v)
                .sum();
            *r = z.get(p, n).max(*r - hedge);
        });
        alpha[n] = coefficients;
    }

    Ok(DualMartingale {
        grid: GridFingerprint::of(paths),
        basis,
        alpha,
    })
}

/// `M_n` per path and exercise date, `M_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleMatrix {
    paths: usize,
    dates: usize,
    m: Vec<f64>,
}

impl MartingaleMatrix {
    pub fn zeros(paths: usize, intervals: usize) -> Self {
        Self {
            paths,
            dates: intervals + 1,
            m: vec![0.0; paths * (intervals + 1)],
        }
    }

    /// Builds from rows of length `N + 1`; every row must start at zero.
    pub fn from_rows(paths: usize, dates: usize, m: Vec<f64>) -> Result<Self> {
        if dates == 0 || m.len() != paths * dates {
            return Err(Error::DimensionMismatch {
                context: "martingale matrix",
                expected: paths * dates,
                actual: m.len(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("martingale matrix"));
        }
        if (0..paths).any(|p| m[p * dates] != 0.0) {
            return Err(Error::InvalidModel("martingale must vanish at date 0".into()));
        }
        Ok(Self { paths, dates, m })
    }

    pub fn len(&self) -> usize {
        self.paths
    }

    pub fn is_empty(&self) -> bool {
        self.paths == 0
    }

    pub fn intervals(&self) -> usize {
        self.dates - 1
    }

    #[inline]
    pub fn get(&self, path: usize, n: usize) -> f64 {
        self.m[path * self.dates + n]
    }

    pub fn row(&self, path: usize) -> &[f64] {
        &self.m[path * self.dates..(path + 1) * self.dates]
    }
}

/// Evaluates `M_n = sum_{l <= n} alpha_l . dX_l` along `paths`.
pub fn evaluate_martingale(dm: &DualMartingale, paths: &PathBatch) -> Result<MartingaleMatrix> {
    dm.grid.check(paths)?;
    dm.basis.check_paths(paths)?;
    let dates = dm.basis.intervals + 1;
    let mut m = vec![0.0; paths.len() * dates];
    m.par_chunks_mut(dates).enumerate().for_each_init(Vec::new, |buf, (p, row)| {
        for n in 0..dm.basis.intervals {
            dm.basis.sparse_increments(paths, p, n, buf);
            let inc: f64 = buf.iter().map(|&(i, v)| dm.alpha[n][i] * v).sum();
            row[n + 1] = row[n] + inc;
        }
    });
    Ok(MartingaleMatrix {
        paths: paths.len(),
        dates,
        m,
    })
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_bytes<const K: usize>(r: &mut impl Read, what: &str) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated file while reading {what}: {e}")))?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    Ok(u32::from_le_bytes(get_bytes(r, what)?) as usize)
}

fn get_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(get_bytes(r, what)?))
}

fn get_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(get_bytes(r, what)?))
}

/// Serialises coefficients, breakpoints and grid metadata.
pub fn write_martingale(dm: &DualMartingale, w: &mut impl Write) -> Result<()> {
    let b = &dm.basis;
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION as usize)?;
    for v in [b.dim, b.intervals, b.subticks, b.bins] {
        put_u32(w, v)?;
    }
    put_u32(w, match b.layout {
        SubtickLayout::Shared => 0,
        SubtickLayout::PerSubtick => 1,
    })?;
    put_f64(w, dm.grid.maturity)?;
    put_f64(w, dm.grid.rate)?;
    for &q in &dm.grid.dividends {
        put_f64(w, q)?;
    }
    w.write_all(&dm.grid.fit_seed.to_le_bytes())?;
    w.write_all(&dm.grid.fit_paths.to_le_bytes())?;
    for local in &b.locals {
        for bp in local.breakpoints() {
            put_u32(w, bp.len())?;
            for &t in bp {
                put_f64(w, t)?;
            }
        }
    }
    for a in &dm.alpha {
        for &v in a {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_martingale(r: &mut impl Read) -> Result<DualMartingale> {
    let magic: [u8; 4] = get_bytes(r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a martingale coefficient file".into()));
    }
    let version = get_u32(r, "version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let dim = get_u32(r, "dimension")?;
    let intervals = get_u32(r, "exercise intervals")?;
    let subticks = get_u32(r, "sub-ticks")?;
    let bins = get_u32(r, "bins")?;
    if dim == 0 || intervals == 0 || subticks == 0 || bins == 0 {
        return Err(Error::Format("zero-sized grid in header".into()));
    }
    let layout = match get_u32(r, "layout")? {
        0 => SubtickLayout::Shared,
        1 => SubtickLayout::PerSubtick,
        other => return Err(Error::Format(format!("unknown coefficient layout {other}"))),
    };
    let maturity = get_f64(r, "maturity")?;
    let rate = get_f64(r, "rate")?;
    let dividends = (0..dim).map(|_| get_f64(r, "dividends")).collect::<Result<Vec<_>>>()?;
    let fit_seed = get_u64(r, "seed")?;
    let fit_paths = get_u64(r, "path count")?;

    let mut locals = Vec::with_capacity(intervals * subticks);
    for _ in 0..intervals * subticks {
        let mut breakpoints = Vec::with_capacity(dim);
        for _ in 0..dim {
            let count = get_u32(r, "breakpoint count")?;
            if count >= bins {
                return Err(Error::Format(format!("{count} breakpoints for {bins} bins")));
            }
            breakpoints.push((0..count).map(|_| get_f64(r, "breakpoints")).collect::<Result<Vec<_>>>()?);
        }
        locals.push(LocalBasis::from_breakpoints(bins, breakpoints).map_err(|e| Error::Format(e.to_string()))?);
    }
    let basis = IncrementBasis::new(intervals, subticks, layout, locals)?;
    let l = basis.len();
    let alpha = (0..intervals)
        .map(|_| (0..l).map(|_| get_f64(r, "coefficients")).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    if alpha.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite coefficient".into()));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after coefficients".into()));
    }
    Ok(DualMartingale {
        basis,
        alpha,
        grid: GridFingerprint {
            dim,
            intervals,
            subticks,
            maturity,
            rate,
            dividends,
            fit_seed,
            fit_paths,
        },
    })
}

pub fn save_martingale(dm: &DualMartingale, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_martingale(dm, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_martingale(path: impl AsRef<Path>) -> Result<DualMartingale> {
    read_martingale(&mut BufReader::new(File::open(path)?))
}
