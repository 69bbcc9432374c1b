//! Regression bases and a rank-tolerant linear least-squares solver.
//!
//! Two solve paths are provided:
//!
//! * [`least_squares_fit`] works on a dense design matrix. Row blocks are
//!   reduced by Householder QR (in a fixed block order, so results do not
//!   depend on the thread count) and the final triangular factor is solved by
//!   SVD, dropping singular values below `1e-10 * sigma_max`.
//! * [`GramAccumulator`] accumulates `X^T X` from sparse rows, for the dual
//!   martingale fit where each row has only `d * Nbar` non-zeros out of
//!   `P * d * Nbar`. The Gram matrix is Jacobi-scaled and solved by a
//!   truncated symmetric eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::{Error, Result};

/// Singular values below this fraction of the largest one get zero weight.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Relative eigenvalue cut-off for Gram-matrix solves after unit-diagonal
/// scaling. Squaring loses half the digits, so this is the tightest cut that
/// still separates exact null directions from round-off.
pub const GRAM_EIGEN_TOLERANCE: f64 = 1e-12;

const QR_BLOCK_ROWS: usize = 2048;

/// A map from a state vector to a fixed-length feature vector.
pub trait FeatureMap {
    /// State dimension.
    fn dim(&self) -> usize;
    /// Number of features.
    fn len(&self) -> usize;
    /// Writes the features of `state` into `out` (length [`FeatureMap::len`]).
    fn features_into(&self, state: &[f64], out: &mut [f64]);
}

/// Checked feature evaluation.
pub fn evaluate_features<B: FeatureMap + ?Sized>(basis: &B, state: &[f64]) -> Result<Vec<f64>> {
    if state.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            context: "feature state",
            expected: basis.dim(),
            actual: state.len(),
        });
    }
    let mut out = vec![0.0; basis.len()];
    basis.features_into(state, &mut out);
    Ok(out)
}

/// All monomials of total degree at most `degree` in `dim` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    degree: usize,
    dim: usize,
    exponents: Vec<Vec<u32>>,
}

impl PolynomialBasis {
    pub fn new(degree: usize, dim: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut current = vec![0u32; dim];
            push_compositions(total as u32, 0, &mut current, &mut exponents);
        }
        Self { degree, dim, exponents }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }
}

fn push_compositions(remaining: u32, k: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if k + 1 == current.len() {
        current[k] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[k] = e;
        push_compositions(remaining - e, k + 1, current, out);
    }
    current[k] = 0;
}

pub fn build_polynomial_basis(degree: usize, dim: usize) -> PolynomialBasis {
    PolynomialBasis::new(degree, dim)
}

impl FeatureMap for PolynomialBasis {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.exponents.len()
    }

    fn features_into(&self, state: &[f64], out: &mut [f64]) {
        let width = self.degree + 1;
        let mut powers = vec![1.0; self.dim * width];
        for (k, &x) in state.iter().enumerate() {
            for e in 1..width {
                powers[k * width + e] = powers[k * width + e - 1] * x;
            }
        }
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            *slot = exps
                .iter()
                .enumerate()
                .map(|(k, &e)| powers[k * width + e as usize])
                .product();
        }
    }
}

/// Per-dimension indicator cells.
///
/// Dimension `k` is split by its sorted thresholds into at most `bins` cells;
/// a value equal to a threshold belongs to the cell on its right. Features are
/// laid out `[k * bins + p]`, one-hot within each dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBasis {
    bins: usize,
    breakpoints: Vec<Vec<f64>>,
}

impl LocalBasis {
    /// Equal-occupancy cells from the empirical quantiles `k / bins` of
    /// `samples` (rows of length `dim`).
    pub fn from_samples(samples: &[f64], dim: usize, bins: usize) -> Result<Self> {
        if bins == 0 || dim == 0 {
            return Err(Error::DegenerateSamples("need at least one bin and one dimension".into()));
        }
        if !samples.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                context: "local basis samples",
                expected: dim,
                actual: samples.len() % dim,
            });
        }
        let count = samples.len() / dim;
        if count < bins {
            return Err(Error::DegenerateSamples(format!("{count} samples for {bins} bins")));
        }
        let mut breakpoints = Vec::with_capacity(dim);
        let mut column = Vec::with_capacity(count);
        for k in 0..dim {
            column.clear();
            column.extend(samples.iter().skip(k).step_by(dim).copied());
            if column.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("local basis samples"));
            }
            column.sort_by(f64::total_cmp);
            if column[0] == column[count - 1] {
                return Err(Error::DegenerateSamples(format!("all samples equal in dimension {k}")));
            }
            breakpoints.push(quantile_thresholds(&column, bins));
        }
        Ok(Self { bins, breakpoints })
    }

    /// Explicit thresholds; each list must be strictly increasing with at most `bins - 1` entries.
    pub fn from_breakpoints(bins: usize, breakpoints: Vec<Vec<f64>>) -> Result<Self> {
        if bins == 0 || breakpoints.is_empty() {
            return Err(Error::DegenerateSamples("need at least one bin and one dimension".into()));
        }
        for (k, b) in breakpoints.iter().enumerate() {
            if b.len() >= bins {
                return Err(Error::DegenerateSamples(format!("{} thresholds for {bins} bins in dimension {k}", b.len())));
            }
            if b.iter().any(|v| !v.is_finite()) || b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::DegenerateSamples(format!("thresholds not strictly increasing in dimension {k}")));
            }
        }
        Ok(Self { bins, breakpoints })
    }

    /// A basis whose first cell covers the whole line in every dimension.
    pub fn single_cell(bins: usize, dim: usize) -> Self {
        Self {
            bins: bins.max(1),
            breakpoints: vec![Vec::new(); dim],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn breakpoints(&self) -> &[Vec<f64>] {
        &self.breakpoints
    }

    /// Cell index of `x` along dimension `k`.
    #[inline]
    pub fn cell(&self, k: usize, x: f64) -> usize {
        self.breakpoints[k].partition_point(|&t| t <= x)
    }
}

fn quantile_thresholds(sorted: &[f64], bins: usize) -> Vec<f64> {
    let count = sorted.len();
    let mut out: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    for j in 1..bins {
        let i = j * count / bins;
        let t = 0.5 * (sorted[i - 1] + sorted[i]);
        if out.last().is_none_or(|&last| t > last) {
            out.push(t);
        }
    }
    out
}

pub fn build_local_basis(samples: &[f64], dim: usize, bins: usize) -> Result<LocalBasis> {
    LocalBasis::from_samples(samples, dim, bins)
}

impl FeatureMap for LocalBasis {
    fn dim(&self) -> usize {
        self.breakpoints.len()
    }

    fn len(&self) -> usize {
        self.bins * self.breakpoints.len()
    }

    fn features_into(&self, state: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (k, &x) in state.iter().enumerate() {
            out[k * self.bins + self.cell(k, x)] = 1.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresResult {
    pub coefficients: Vec<f64>,
    pub rank: usize,
    pub residual_norm: f64,
}

/// Minimises `|targets - features * w|_2` with rank truncation.
pub fn least_squares_fit(features: &DMatrix<f64>, targets: &[f64]) -> Result<LeastSquaresResult> {
    let (rows, cols) = features.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::DimensionMismatch {
            context: "least squares design",
            expected: 1,
            actual: 0,
        });
    }
    if targets.len() != rows {
        return Err(Error::DimensionMismatch {
            context: "least squares targets",
            expected: rows,
            actual: targets.len(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least squares features"));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least squares targets"));
    }

    let starts: Vec<usize> = (0..rows).step_by(QR_BLOCK_ROWS).collect();
    let blocks: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&start| {
            let len = QR_BLOCK_ROWS.min(rows - start);
            let mut aug = DMatrix::zeros(len, cols + 1);
            aug.view_mut((0, 0), (len, cols)).copy_from(&features.view((start, 0), (len, cols)));
            for i in 0..len {
                aug[(i, cols)] = targets[start + i];
            }
            aug.qr().r()
        })
        .collect();

    let mut blocks = blocks.into_iter();
    let mut acc = blocks.next().expect("at least one block");
    for next in blocks {
        let mut stacked = DMatrix::zeros(acc.nrows() + next.nrows(), cols + 1);
        stacked.view_mut((0, 0), acc.shape()).copy_from(&acc);
        stacked.view_mut((acc.nrows(), 0), next.shape()).copy_from(&next);
        acc = stacked.qr().r();
    }
    solve_triangular_factor(&acc, cols)
}

/// Solves the reduced system held in the augmented factor `[R | c]`.
fn solve_triangular_factor(aug: &DMatrix<f64>, cols: usize) -> Result<LeastSquaresResult> {
    let r_rows = aug.nrows().min(cols);
    let r = aug.view((0, 0), (r_rows, cols)).clone_owned();
    let c = aug.view((0, cols), (r_rows, 1)).clone_owned();
    let mut residual_sq: f64 = (r_rows..aug.nrows()).map(|i| aug[(i, cols)].powi(2)).sum();

    let svd = r.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let (coefficients, rank) = if sigma_max > 0.0 {
        let eps = RANK_TOLERANCE * sigma_max;
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        let w = svd.solve(&c, eps).map_err(|_| Error::NonFinite("singular value decomposition"))?;
        (w.column(0).iter().copied().collect::<Vec<_>>(), rank)
    } else {
        (vec![0.0; cols], 0)
    };
    let fitted = &r * DVector::from_column_slice(&coefficients);
    residual_sq += (c.column(0) - fitted).norm_squared();
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least squares solution"));
    }
    Ok(LeastSquaresResult {
        coefficients,
        rank,
        residual_norm: residual_sq.sqrt(),
    })
}

/// Accumulates normal equations `X^T X w = X^T y` from (possibly sparse) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GramAccumulator {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    target_sq: f64,
    rows: usize,
}

impl GramAccumulator {
    pub fn new(features: usize) -> Self {
        Self {
            gram: DMatrix::zeros(features, features),
            rhs: DVector::zeros(features),
            target_sq: 0.0,
            rows: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Adds one row given by its non-zero `(index, value)` entries.
    /// Indices must be distinct.
    pub fn add_sparse(&mut self, entries: &[(usize, f64)], target: f64) {
        for &(i, xi) in entries {
            self.rhs[i] += xi * target;
            for &(j, xj) in entries {
                self.gram[(i, j)] += xi * xj;
            }
        }
        self.target_sq += target * target;
        self.rows += 1;
    }

    pub fn merge(&mut self, other: &GramAccumulator) {
        self.gram += &other.gram;
        self.rhs += &other.rhs;
        self.target_sq += other.target_sq;
        self.rows += other.rows;
    }

    /// Truncated pseudo-inverse solve of the accumulated system.
    pub fn solve(&self) -> Result<LeastSquaresResult> {
        let n = self.rhs.len();
        if self.gram.iter().any(|v| !v.is_finite()) || self.rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("normal equations"));
        }
        let active: Vec<usize> = (0..n).filter(|&i| self.gram[(i, i)] > 0.0).collect();
        let mut coefficients = vec![0.0; n];
        let mut rank = 0;
        if !active.is_empty() {
            let scale: Vec<f64> = active.iter().map(|&i| self.gram[(i, i)].sqrt().recip()).collect();
            let m = active.len();
            let scaled = DMatrix::from_fn(m, m, |a, b| self.gram[(active[a], active[b])] * scale[a] * scale[b]);
            let rhs = DVector::from_fn(m, |a, _| self.rhs[active[a]] * scale[a]);
            let eig = SymmetricEigen::new(scaled);
            let lambda_max = eig.eigenvalues.max();
            let cut = GRAM_EIGEN_TOLERANCE * lambda_max;
            let mut w = DVector::zeros(m);
            for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
                if lambda > cut {
                    let v = eig.eigenvectors.column(idx);
                    w += v * (v.dot(&rhs) / lambda);
                    rank += 1;
                }
            }
            for (a, &i) in active.iter().enumerate() {
                coefficients[i] = w[a] * scale[a];
            }
        }
        let w = DVector::from_column_slice(&coefficients);
        let residual_sq = self.target_sq - 2.0 * w.dot(&self.rhs) + w.dot(&(&self.gram * &w));
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("normal equations solution"));
        }
        Ok(LeastSquaresResult {
            coefficients,
            rank,
            residual_norm: residual_sq.max(0.0).sqrt(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polynomial_feature_counts() {
        assert_eq!(PolynomialBasis::new(0, 3).len(), 1);
        assert_eq!(PolynomialBasis::new(5, 3).len(), 56);
        assert_eq!(PolynomialBasis::new(6, 1).len(), 7);
        let b = PolynomialBasis::new(4, 2);
        let mut seen = b.exponents().to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), b.len());
        assert_eq!(b.exponents()[0], vec![0, 0]);
    }

    #[test]
    fn polynomial_values() {
        let b = PolynomialBasis::new(2, 1);
        assert_eq!(evaluate_features(&b, &[3.0]).unwrap(), vec![1.0, 3.0, 9.0]);
        assert!(evaluate_features(&b, &[3.0, 1.0]).is_err());
    }

    #[test]
    fn local_quantiles_balance_occupancy() {
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        let basis = LocalBasis::from_samples(&samples, 1, 4).unwrap();
        assert_eq!(basis.breakpoints()[0], vec![25.5, 50.5, 75.5]);
        let mut counts = [0usize; 4];
        for &s in &samples {
            counts[basis.cell(0, s)] += 1;
        }
        for c in counts {
            assert!(c.abs_diff(25) <= 1);
        }
    }

    #[test]
    fn local_basis_edge_cases() {
        let samples: Vec<f64> = (1..=10).map(f64::from).collect();
        let one = LocalBasis::from_samples(&samples, 1, 1).unwrap();
        assert!(one.breakpoints()[0].is_empty());
        assert_eq!(evaluate_features(&one, &[1e9]).unwrap(), vec![1.0]);
        assert!(LocalBasis::from_samples(&[2.0; 10], 1, 3).is_err());
        assert!(LocalBasis::from_samples(&samples, 1, 11).is_err());
        let mut shuffled = samples.clone();
        shuffled.reverse();
        shuffled.swap(2, 7);
        assert_eq!(
            LocalBasis::from_samples(&shuffled, 1, 3).unwrap(),
            LocalBasis::from_samples(&samples, 1, 3).unwrap()
        );
    }

    #[test]
    fn local_tie_goes_right() {
        let basis = LocalBasis::from_breakpoints(2, vec![vec![100.0]]).unwrap();
        assert_eq!(evaluate_features(&basis, &[90.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(evaluate_features(&basis, &[100.0]).unwrap(), vec![0.0, 1.0]);
        assert!(LocalBasis::from_breakpoints(2, vec![vec![1.0, 2.0]]).is_err());
        assert!(LocalBasis::from_breakpoints(3, vec![vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn identity_design_returns_targets() {
        let x = DMatrix::identity(4, 4);
        let y = [1.0, -2.0, 3.5, 0.25];
        let fit = least_squares_fit(&x, &y).unwrap();
        for (a, b) in fit.coefficients.iter().zip(y) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(fit.rank, 4);
        assert!(fit.residual_norm < 1e-12);
    }

    fn random_system(rows: usize, cols: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..rows).map(|_| rng.random_range(-5.0..5.0)).collect();
        (x, y)
    }

    /// Normal equations solved by Gaussian elimination with partial pivoting.
    fn normal_equations_oracle(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        let (rows, n) = x.shape();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..rows).map(|r| x[(r, i)] * x[(r, j)]).sum();
            }
            a[i][n] = (0..rows).map(|r| x[(r, i)] * y[r]).sum();
        }
        for col in 0..n {
            let pivot = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, pivot);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
        let mut w = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| a[i][k] * w[k]).sum();
            w[i] = (a[i][n] - s) / a[i][i];
        }
        w
    }

    #[test]
    fn full_rank_matches_normal_equations() {
        let (x, y) = random_system(100, 5, 42);
        let fit = least_squares_fit(&x, &y).unwrap();
        let oracle = normal_equations_oracle(&x, &y);
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn multi_block_reduction_matches_single_block() {
        let (x, y) = random_system(5000, 6, 9);
        let fit = least_squares_fit(&x, &y).unwrap();
        let oracle = normal_equations_oracle(&x, &y);
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3));
        }
        let resid: f64 = (0..5000)
            .map(|r| {
                let f: f64 = (0..6).map(|c| x[(r, c)] * fit.coefficients[c]).sum();
                (y[r] - f).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        assert!((resid - fit.residual_norm).abs() < 1e-8 * resid);
    }

    #[test]
    fn duplicated_column_gets_no_redundant_weight() {
        let (x, y) = random_system(60, 3, 3);
        let dup = DMatrix::from_fn(60, 4, |r, c| x[(r, c.min(2))]);
        let base = least_squares_fit(&x, &y).unwrap();
        let fit = least_squares_fit(&dup, &y).unwrap();
        assert_eq!(fit.rank, 3);
        assert!((fit.coefficients[2] - fit.coefficients[3]).abs() < 1e-9);
        for r in 0..60 {
            let a: f64 = (0..3).map(|c| x[(r, c)] * base.coefficients[c]).sum();
            let b: f64 = (0..4).map(|c| dup[(r, c)] * fit.coefficients[c]).sum();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_inputs_error() {
        let mut x = DMatrix::identity(2, 2);
        assert!(least_squares_fit(&x, &[1.0, f64::NAN]).is_err());
        x[(0, 1)] = f64::INFINITY;
        assert!(least_squares_fit(&x, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gram_solver_matches_dense_solver() {
        let (x, y) = random_system(300, 5, 17);
        let mut acc = GramAccumulator::new(6);
        for r in 0..300 {
            let entries: Vec<(usize, f64)> = (0..5).map(|c| (c, x[(r, c)])).collect();
            acc.add_sparse(&entries, y[r]);
        }
        let gram = acc.solve().unwrap();
        let dense = least_squares_fit(&x, &y).unwrap();
        assert_eq!(gram.coefficients[5], 0.0);
        assert_eq!(gram.rank, 5);
        for c in 0..5 {
            assert!((gram.coefficients[c] - dense.coefficients[c]).abs() < 1e-9);
        }
        assert!((gram.residual_norm - dense.residual_norm).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn residual_is_orthogonal_to_features(seed in 0u64..1000, rows in 8usize..80, cols in 1usize..6) {
            let (x, y) = random_system(rows, cols, seed);
            let fit = least_squares_fit(&x, &y).unwrap();
            let w = DVector::from_column_slice(&fit.coefficients);
            let resid = DVector::from_column_slice(&y) - &x * w;
            for c in 0..cols {
                let col = x.column(c);
                proptest::prop_assert!(col.dot(&resid).abs() <= 1e-8 * col.norm() * resid.norm().max(1.0));
            }
        }

        #[test]
        fn local_cells_partition_every_state(x in -1e3f64..1e3, y in -1e3f64..1e3) {
            let basis = LocalBasis::from_breakpoints(4, vec![vec![-10.0, 0.0, 10.0], vec![5.0]]).unwrap();
            let f = evaluate_features(&basis, &[x, y]).unwrap();
            proptest::prop_assert_eq!(f[..4].iter().sum::<f64>(), 1.0);
            proptest::prop_assert_eq!(f[4..].iter().sum::<f64>(), 1.0);
        }
    }
}
