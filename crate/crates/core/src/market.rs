//! Market model, payoffs and risk-neutral path simulation.
//!
//! Assets follow independent geometric Brownian motions. Paths are sampled
//! with the exact log-normal transition on the fine grid
//! `t_f = T * f / (N * Nbar)`, `f = 0..=N * Nbar`, so the discounted tradable
//! `e^{(delta - r) t} S_t` is an exact discrete-time martingale.
//!
//! Every path draws from its own ChaCha8 stream keyed by `(seed, path index)`,
//! so path `i` is the same whatever the batch size or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Multi-asset Black–Scholes market with a Bermudan exercise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Initial prices, one per asset.
    pub spot: Vec<f64>,
    /// Continuously compounded risk-free rate.
    pub rate: f64,
    /// Dividend yields. Empty means zero for every asset.
    #[serde(default)]
    pub dividends: Vec<f64>,
    /// Volatilities, one per asset.
    pub volatility: Vec<f64>,
    /// Maturity in years.
    pub maturity: f64,
    /// Number of exercise intervals `N`; exercise dates are `T * n / N`, `n = 0..=N`.
    pub exercise_dates: usize,
    /// Sub-ticks per exercise interval (`Nbar >= 1`).
    pub subticks: usize,
}

impl ModelSpec {
    /// Single-asset model without dividends.
    pub fn single(spot: f64, rate: f64, volatility: f64, maturity: f64, exercise_dates: usize, subticks: usize) -> Self {
        Self {
            spot: vec![spot],
            rate,
            dividends: Vec::new(),
            volatility: vec![volatility],
            maturity,
            exercise_dates,
            subticks,
        }
    }

    pub fn dim(&self) -> usize {
        self.spot.len()
    }

    pub fn dividend(&self, k: usize) -> f64 {
        self.dividends.get(k).copied().unwrap_or(0.0)
    }

    /// Number of fine-grid points, `N * Nbar + 1`.
    pub fn grid_len(&self) -> usize {
        self.exercise_dates * self.subticks + 1
    }

    pub fn fine_time(&self, f: usize) -> f64 {
        self.maturity * f as f64 / (self.exercise_dates * self.subticks) as f64
    }

    pub fn exercise_time(&self, n: usize) -> f64 {
        self.maturity * n as f64 / self.exercise_dates as f64
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if d == 0 {
            return bad("at least one asset is required".into());
        }
        if self.volatility.len() != d {
            return bad(format!("{} volatilities for {d} assets", self.volatility.len()));
        }
        if !self.dividends.is_empty() && self.dividends.len() != d {
            return bad(format!("{} dividend yields for {d} assets", self.dividends.len()));
        }
        if self.spot.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("initial prices must be positive".into());
        }
        if self.volatility.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("volatilities must be non-negative".into());
        }
        if !self.rate.is_finite() || self.dividends.iter().any(|q| !q.is_finite()) {
            return bad("rates must be finite".into());
        }
        if !(self.maturity.is_finite() && self.maturity > 0.0) {
            return bad("maturity must be positive".into());
        }
        if self.exercise_dates == 0 {
            return bad("at least one exercise interval is required".into());
        }
        if self.subticks == 0 {
            return bad("at least one sub-tick per interval is required".into());
        }
        Ok(())
    }
}

/// Contract payoff `Psi(S)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    /// `(K - S)_+` on a single asset.
    Put { strike: f64 },
    /// Put butterfly `(K1 - S)_+ - 2 (m - S)_+ + (K2 - S)_+` with `m = (K1 + K2) / 2`:
    /// a tent on `[K1, K2]` with apex `(K2 - K1) / 2` at `m`.
    Butterfly { low_strike: f64, high_strike: f64 },
    /// `(K - mean_k S^k)_+`.
    BasketPut { strike: f64 },
    /// `(max_k S^k - K)_+`.
    MaxCall { strike: f64 },
    /// `min_k` of the single-asset butterfly applied to each coordinate.
    MinButterfly { low_strike: f64, high_strike: f64 },
}

fn butterfly(low: f64, high: f64, s: f64) -> f64 {
    let mid = 0.5 * (low + high);
    (low - s).max(0.0) - 2.0 * (mid - s).max(0.0) + (high - s).max(0.0)
}

impl PayoffSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PayoffSpec::Put { strike } | PayoffSpec::BasketPut { strike } | PayoffSpec::MaxCall { strike } => {
                strike.is_finite() && strike > 0.0
            }
            PayoffSpec::Butterfly { low_strike, high_strike } | PayoffSpec::MinButterfly { low_strike, high_strike } => {
                low_strike.is_finite() && high_strike.is_finite() && low_strike > 0.0 && low_strike < high_strike
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPayoff(format!("{self:?}: strikes must be positive and ordered")))
        }
    }

    /// Checks that the payoff accepts states of dimension `d`.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            PayoffSpec::Put { .. } | PayoffSpec::Butterfly { .. } if d != 1 => Err(Error::DimensionMismatch {
                context: "single-asset payoff",
                expected: 1,
                actual: d,
            }),
            _ if d == 0 => Err(Error::DimensionMismatch {
                context: "payoff",
                expected: 1,
                actual: 0,
            }),
            _ => Ok(()),
        }
    }

    /// Evaluates the payoff without dimension checks.
    #[inline]
    pub fn evaluate(&self, s: &[f64]) -> f64 {
        match *self {
            PayoffSpec::Put { strike } => (strike - s[0]).max(0.0),
            PayoffSpec::Butterfly { low_strike, high_strike } => butterfly(low_strike, high_strike, s[0]),
            PayoffSpec::BasketPut { strike } => {
                let mean = s.iter().sum::<f64>() / s.len() as f64;
                (strike - mean).max(0.0)
            }
            PayoffSpec::MaxCall { strike } => {
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (max - strike).max(0.0)
            }
            PayoffSpec::MinButterfly { low_strike, high_strike } => s
                .iter()
                .map(|&x| butterfly(low_strike, high_strike, x))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// Checked payoff evaluation.
pub fn payoff_value(payoff: &PayoffSpec, s: &[f64]) -> Result<f64> {
    payoff.check_dim(s.len())?;
    Ok(payoff.evaluate(s))
}

/// Simulated asset prices on the fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    model: ModelSpec,
    paths: usize,
    seed: u64,
    /// `[path][f][k]`
    values: Vec<f64>,
    /// `e^{r t_f}`
    discount: Vec<f64>,
    /// `e^{(delta_k - r) t_f}` laid out `[f][k]`
    tradable_factor: Vec<f64>,
}

impl PathBatch {
    /// Wraps externally generated prices (laid out `[path][f][k]`).
    pub fn from_values(model: ModelSpec, values: Vec<f64>, seed: u64) -> Result<Self> {
        model.validate()?;
        let stride = model.grid_len() * model.dim();
        if values.is_empty() || !values.len().is_multiple_of(stride) {
            return Err(Error::DimensionMismatch {
                context: "path values",
                expected: stride,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidModel("path prices must be positive".into()));
        }
        let paths = values.len() / stride;
        for p in 0..paths {
            if values[p * stride..p * stride + model.dim()] != model.spot[..] {
                return Err(Error::InvalidModel(format!("path {p} does not start at the initial prices")));
            }
        }
        Ok(Self::assemble(model, paths, seed, values))
    }

    fn assemble(model: ModelSpec, paths: usize, seed: u64, values: Vec<f64>) -> Self {
        let d = model.dim();
        let len = model.grid_len();
        let discount = (0..len).map(|f| (model.rate * model.fine_time(f)).exp()).collect();
        let mut tradable_factor = Vec::with_capacity(len * d);
        for f in 0..len {
            let t = model.fine_time(f);
            for k in 0..d {
                tradable_factor.push(((model.dividend(k) - model.rate) * t).exp());
            }
        }
        Self {
            model,
            paths,
            seed,
            values,
            discount,
            tradable_factor,
        }
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.paths
    }

    pub fn is_empty(&self) -> bool {
        self.paths == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn grid_len(&self) -> usize {
        self.model.grid_len()
    }

    /// Fine-grid index of exercise date `n`.
    pub fn exercise_index(&self, n: usize) -> usize {
        n * self.model.subticks
    }

    /// Asset prices of `path` at fine index `f`.
    #[inline]
    pub fn state(&self, path: usize, f: usize) -> &[f64] {
        let d = self.dim();
        let start = (path * self.grid_len() + f) * d;
        &self.values[start..start + d]
    }

    /// Whole fine-grid trajectory of `path`, laid out `[f][k]`.
    pub fn path(&self, path: usize) -> &[f64] {
        let stride = self.grid_len() * self.dim();
        &self.values[path * stride..(path + 1) * stride]
    }

    /// Risk-free asset `S^0 = e^{r t}` on the fine grid.
    pub fn discount(&self) -> &[f64] {
        &self.discount
    }

    /// Discounted tradable `e^{(delta_k - r) t_f} S^k_{t_f}`.
    #[inline]
    pub fn tradable(&self, path: usize, f: usize, k: usize) -> f64 {
        self.state(path, f)[k] * self.tradable_factor[f * self.dim() + k]
    }
}

/// Simulates `paths` risk-neutral trajectories on the fine grid.
pub fn simulate_paths(model: &ModelSpec, paths: usize, seed: u64) -> Result<PathBatch> {
    model.validate()?;
    if paths == 0 {
        return Err(Error::InvalidModel("path count must be at least 1".into()));
    }
    let d = model.dim();
    let len = model.grid_len();
    let h = model.maturity / (model.exercise_dates * model.subticks) as f64;
    let drift: Vec<f64> = (0..d)
        .map(|k| (model.rate - model.dividend(k) - 0.5 * model.volatility[k].powi(2)) * h)
        .collect();
    let diffusion: Vec<f64> = model.volatility.iter().map(|s| s * h.sqrt()).collect();

    let stride = len * d;
    let mut values = vec![0.0; paths * stride];
    values.par_chunks_mut(stride).enumerate().for_each(|(i, row)| {
        let mut rng = path_rng(seed, i as u64);
        row[..d].copy_from_slice(&model.spot);
        for f in 1..len {
            for k in 0..d {
                let xi: f64 = StandardNormal.sample(&mut rng);
                row[f * d + k] = row[(f - 1) * d + k] * (drift[k] + diffusion[k] * xi).exp();
            }
        }
    });
    Ok(PathBatch::assemble(model.clone(), paths, seed, values))
}

/// Independent stream for one path.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Discounted payoffs `Z_n = Psi(S_{T_n}) / e^{r T_n}` at the exercise dates.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffMatrix {
    paths: usize,
    dates: usize,
    z: Vec<f64>,
}

impl PayoffMatrix {
    /// Builds from rows of length `N + 1`.
    pub fn from_rows(paths: usize, dates: usize, z: Vec<f64>) -> Result<Self> {
        if z.len() != paths * dates || dates == 0 {
            return Err(Error::DimensionMismatch {
                context: "payoff matrix",
                expected: paths * dates,
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("payoff matrix"));
        }
        Ok(Self { paths, dates, z })
    }

    pub fn len(&self) -> usize {
        self.paths
    }

    pub fn is_empty(&self) -> bool {
        self.paths == 0
    }

    /// Number of exercise intervals `N` (rows hold `N + 1` dates).
    pub fn intervals(&self) -> usize {
        self.dates - 1
    }

    #[inline]
    pub fn get(&self, path: usize, n: usize) -> f64 {
        self.z[path * self.dates + n]
    }

    pub fn row(&self, path: usize) -> &[f64] {
        &self.z[path * self.dates..(path + 1) * self.dates]
    }

    /// Adds `c` to every entry.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            paths: self.paths,
            dates: self.dates,
            z: self.z.iter().map(|v| v + c).collect(),
        }
    }
}

pub fn discounted_payoffs(paths: &PathBatch, payoff: &PayoffSpec) -> Result<PayoffMatrix> {
    payoff.validate()?;
    payoff.check_dim(paths.dim())?;
    let n_dates = paths.model().exercise_dates + 1;
    let mut z = Vec::with_capacity(paths.len() * n_dates);
    for p in 0..paths.len() {
        for n in 0..n_dates {
            let f = paths.exercise_index(n);
            z.push(payoff.evaluate(paths.state(p, f)) / paths.discount()[f]);
        }
    }
    PayoffMatrix::from_rows(paths.len(), n_dates, z)
}

/// Black–Scholes European put.
pub fn european_put_closed_form(spot: f64, strike: f64, rate: f64, volatility: f64, maturity: f64) -> f64 {
    let df = (-rate * maturity).exp();
    let total_vol = volatility * maturity.sqrt();
    if total_vol <= f64::EPSILON {
        return (strike * df - spot).max(0.0);
    }
    let normal = Normal::standard();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * volatility * volatility) * maturity) / total_vol;
    let d2 = d1 - total_vol;
    strike * df * normal.cdf(-d2) - spot * normal.cdf(-d1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1() -> ModelSpec {
        ModelSpec::single(100.0, 0.06, 0.4, 0.5, 10, 1)
    }

    #[test]
    fn zero_volatility_paths_are_deterministic_curves() {
        let model = ModelSpec::single(100.0, 0.06, 0.0, 0.5, 10, 3);
        let batch = simulate_paths(&model, 4, 11).unwrap();
        for p in 0..4 {
            for f in 0..model.grid_len() {
                let expected = 100.0 * (0.06 * model.fine_time(f)).exp();
                assert!((batch.state(p, f)[0] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn paths_are_reproducible_and_seed_dependent() {
        let a = simulate_paths(&table1(), 2, 7).unwrap();
        let b = simulate_paths(&table1(), 2, 7).unwrap();
        let c = simulate_paths(&table1(), 2, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.path(0), c.path(0));
    }

    #[test]
    fn path_does_not_depend_on_batch_size() {
        let small = simulate_paths(&table1(), 3, 5).unwrap();
        let large = simulate_paths(&table1(), 50, 5).unwrap();
        for p in 0..3 {
            assert_eq!(small.path(p), large.path(p));
        }
    }

    #[test]
    fn invalid_models_are_rejected() {
        let mut m = table1();
        m.maturity = 0.0;
        assert!(simulate_paths(&m, 1, 0).is_err());
        let mut m = table1();
        m.spot[0] = -1.0;
        assert!(m.validate().is_err());
        let mut m = table1();
        m.subticks = 0;
        assert!(m.validate().is_err());
        assert!(simulate_paths(&table1(), 0, 0).is_err());
    }

    #[test]
    fn payoff_examples() {
        let put = PayoffSpec::Put { strike: 100.0 };
        assert_eq!(payoff_value(&put, &[90.0]).unwrap(), 10.0);
        let call = PayoffSpec::MaxCall { strike: 100.0 };
        assert_eq!(payoff_value(&call, &[95.0, 105.0]).unwrap(), 5.0);
        assert!(payoff_value(&put, &[90.0, 80.0]).is_err());
        let basket = PayoffSpec::BasketPut { strike: 100.0 };
        assert!((payoff_value(&basket, &[90.0, 100.0, 95.0]).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn butterfly_is_the_nonnegative_tent() {
        let fly = PayoffSpec::Butterfly {
            low_strike: 90.0,
            high_strike: 110.0,
        };
        // brute-force tabulation against the piecewise-linear tent
        for i in 0..=400 {
            let s = 80.0 + 0.1 * i as f64;
            let tent = if s <= 90.0 || s >= 110.0 {
                0.0
            } else {
                10.0 - (s - 100.0).abs()
            };
            assert!((fly.evaluate(&[s]) - tent).abs() < 1e-9, "s = {s}");
        }
        assert_eq!(fly.evaluate(&[100.0]), 10.0);
        let min_fly = PayoffSpec::MinButterfly {
            low_strike: 90.0,
            high_strike: 110.0,
        };
        assert_eq!(min_fly.evaluate(&[100.0, 95.0]), 5.0);
    }

    #[test]
    fn unordered_butterfly_strikes_are_invalid() {
        let fly = PayoffSpec::Butterfly {
            low_strike: 110.0,
            high_strike: 90.0,
        };
        assert!(fly.validate().is_err());
    }

    #[test]
    fn payoff_matrix_first_column_is_constant() {
        let batch = simulate_paths(&table1(), 20, 3).unwrap();
        let z = discounted_payoffs(&batch, &PayoffSpec::Put { strike: 110.0 }).unwrap();
        for p in 0..20 {
            assert_eq!(z.get(p, 0), 10.0);
        }
    }

    #[test]
    fn zero_rate_payoffs_are_undiscounted() {
        let model = ModelSpec::single(100.0, 0.0, 0.3, 1.0, 4, 2);
        let batch = simulate_paths(&model, 10, 1).unwrap();
        let put = PayoffSpec::Put { strike: 100.0 };
        let z = discounted_payoffs(&batch, &put).unwrap();
        for p in 0..10 {
            for n in 0..=4 {
                assert_eq!(z.get(p, n), put.evaluate(batch.state(p, 2 * n)));
            }
        }
    }

    #[test]
    fn deterministic_put_payoffs_vanish() {
        let model = ModelSpec::single(100.0, 0.06, 0.0, 0.5, 10, 1);
        let batch = simulate_paths(&model, 2, 1).unwrap();
        let z = discounted_payoffs(&batch, &PayoffSpec::Put { strike: 100.0 }).unwrap();
        assert!(z.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn black_scholes_put_reference_and_limits() {
        let p = european_put_closed_form(100.0, 100.0, 0.06, 0.4, 0.5);
        assert!((p - 9.6642).abs() < 1e-4, "{p}");
        assert!(european_put_closed_form(100.0, 100.0, 0.06, 1e-12, 0.5).abs() < 1e-9);
        assert!((european_put_closed_form(90.0, 100.0, 0.06, 0.4, 1e-14) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn from_values_checks_layout() {
        let model = ModelSpec::single(100.0, 0.0, 0.2, 1.0, 1, 1);
        assert!(PathBatch::from_values(model.clone(), vec![100.0, 110.0, 100.0, 90.0], 0).is_ok());
        assert!(PathBatch::from_values(model.clone(), vec![100.0, 110.0, 100.0], 0).is_err());
        assert!(PathBatch::from_values(model, vec![101.0, 110.0], 0).is_err());
    }
}
