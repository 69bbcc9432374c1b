//! Exercise policies: Longstaff–Schwartz variants and the proxy random time.
//!
//! All three regression policies run the same backward loop over the interior
//! dates and differ in the regressand and in what is compared:
//!
//! | variant | regressand at date `n` | exercise when |
//! |---|---|---|
//! | `Ls1` | `Z_{tau_{n+1}}` | `Z_n >= P_n` |
//! | `Ls2` | `Z_{tau_{n+1}} - M_{tau_{n+1}} + M_n` | `Z_n >= P_n` |
//! | `Ls2Prime` | `Z_{tau_{n+1}} - M_{tau_{n+1}}` | `Z_n - M_n >= P_n` |
//!
//! `P_n` is the fitted regression function of the exercise-date prices
//! `S_{T_n}`. At `n = 0` the state is deterministic, so the date-0 continuation
//! value is the sample mean of the regressand.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dual_martingale::MartingaleMatrix;
use crate::market::{PathBatch, PayoffMatrix};
use crate::regression::{least_squares_fit, FeatureMap, LocalBasis, PolynomialBasis};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsVariant {
    Ls1,
    Ls2,
    #[serde(rename = "ls2prime")]
    Ls2Prime,
}

impl LsVariant {
    pub fn needs_martingale_to_fit(self) -> bool {
        !matches!(self, LsVariant::Ls1)
    }

    pub fn needs_martingale_to_apply(self) -> bool {
        matches!(self, LsVariant::Ls2Prime)
    }

    pub fn tag(self) -> &'static str {
        match self {
            LsVariant::Ls1 => "ls1",
            LsVariant::Ls2 => "ls2",
            LsVariant::Ls2Prime => "ls2prime",
        }
    }
}

impl fmt::Display for LsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Regression basis family for the continuation value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyBasis {
    /// Monomials of total degree at most `degree` in the standardised prices.
    Polynomial { degree: usize },
    /// Per-coordinate quantile indicator cells.
    Local { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    pub variant: LsVariant,
    pub basis: PolicyBasis,
    /// Regress on, and exercise only, in-the-money paths (`Z_n > 0`).
    pub itm_only: bool,
}

impl PolicyConfig {
    pub fn new(variant: LsVariant, basis: PolicyBasis) -> Self {
        Self {
            variant,
            basis,
            itm_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum DateFeatures {
    Polynomial {
        basis: PolynomialBasis,
        center: Vec<f64>,
        scale: Vec<f64>,
    },
    Local(LocalBasis),
}

impl DateFeatures {
    fn len(&self) -> usize {
        match self {
            DateFeatures::Polynomial { basis, .. } => basis.len(),
            DateFeatures::Local(b) => b.len(),
        }
    }

    fn features_into(&self, state: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        match self {
            DateFeatures::Polynomial { basis, center, scale } => {
                scratch.clear();
                scratch.extend(state.iter().zip(center).zip(scale).map(|((s, c), w)| (s - c) / w));
                basis.features_into(scratch, out);
            }
            DateFeatures::Local(b) => b.features_into(state, out),
        }
    }

    fn fit(basis: PolicyBasis, states: &[f64], dim: usize) -> Result<Self> {
        match basis {
            PolicyBasis::Polynomial { degree } => {
                let count = (states.len() / dim) as f64;
                let mut center = vec![0.0; dim];
                let mut scale = vec![0.0; dim];
                for k in 0..dim {
                    let col = states.iter().skip(k).step_by(dim);
                    let mean = col.clone().sum::<f64>() / count;
                    let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / count;
                    center[k] = mean;
                    scale[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
                }
                Ok(DateFeatures::Polynomial {
                    basis: PolynomialBasis::new(degree, dim),
                    center,
                    scale,
                })
            }
            PolicyBasis::Local { bins } => {
                let mut breakpoints = Vec::with_capacity(dim);
                for k in 0..dim {
                    let column: Vec<f64> = states.iter().skip(k).step_by(dim).copied().collect();
                    match LocalBasis::from_samples(&column, 1, bins.min(column.len()).max(1)) {
                        Ok(b) => breakpoints.push(b.breakpoints()[0].clone()),
                        Err(Error::DegenerateSamples(_)) => breakpoints.push(Vec::new()),
                        Err(e) => return Err(e),
                    }
                }
                Ok(DateFeatures::Local(LocalBasis::from_breakpoints(bins.max(1), breakpoints)?))
            }
        }
    }
}

/// Frozen regression coefficients for one interior exercise date.
#[derive(Debug, Clone, PartialEq)]
pub struct DateRegressor {
    features: DateFeatures,
    coefficients: Vec<f64>,
}

impl DateRegressor {
    /// Estimated continuation value at `state`.
    pub fn continuation(&self, state: &[f64]) -> f64 {
        let mut out = vec![0.0; self.features.len()];
        self.features.features_into(state, &mut Vec::new(), &mut out);
        out.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Regressor with a constant continuation value.
    pub fn constant(value: f64, dim: usize) -> Self {
        Self {
            features: DateFeatures::Polynomial {
                basis: PolynomialBasis::new(0, dim),
                center: vec![0.0; dim],
                scale: vec![1.0; dim],
            },
            coefficients: vec![value],
        }
    }
}

/// A Longstaff–Schwartz exercise rule fitted on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRegressors {
    variant: LsVariant,
    itm_only: bool,
    dim: usize,
    date0_continuation: f64,
    /// Entry `n - 1` holds date `n`, `n = 1..N-1`.
    dates: Vec<DateRegressor>,
}

impl PolicyRegressors {
    /// Assembles a policy from explicit parts.
    pub fn from_parts(
        variant: LsVariant,
        itm_only: bool,
        dim: usize,
        date0_continuation: f64,
        dates: Vec<DateRegressor>,
    ) -> Self {
        Self {
            variant,
            itm_only,
            dim,
            date0_continuation,
            dates,
        }
    }

    pub fn variant(&self) -> LsVariant {
        self.variant
    }

    /// Number of exercise intervals `N`.
    pub fn intervals(&self) -> usize {
        self.dates.len() + 1
    }

    pub fn date0_continuation(&self) -> f64 {
        self.date0_continuation
    }

    /// Regressor for interior date `n`.
    pub fn date(&self, n: usize) -> &DateRegressor {
        &self.dates[n - 1]
    }
}

/// Exercise index per path, in `0..=N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopTimes {
    tau: Vec<usize>,
}

impl StopTimes {
    pub fn new(tau: Vec<usize>) -> Self {
        Self { tau }
    }

    pub fn constant(paths: usize, n: usize) -> Self {
        Self { tau: vec![n; paths] }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.tau
    }

    #[inline]
    pub fn get(&self, path: usize) -> usize {
        self.tau[path]
    }
}

fn check_inputs(paths: &PathBatch, z: &PayoffMatrix, m: Option<&MartingaleMatrix>) -> Result<()> {
    if z.len() != paths.len() || z.intervals() != paths.model().exercise_dates {
        return Err(Error::DimensionMismatch {
            context: "payoffs vs paths",
            expected: paths.len(),
            actual: z.len(),
        });
    }
    if let Some(m) = m {
        if m.len() != z.len() || m.intervals() != z.intervals() {
            return Err(Error::DimensionMismatch {
                context: "martingale vs payoffs",
                expected: z.len(),
                actual: m.len(),
            });
        }
    }
    Ok(())
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let len = values.len();
    if len == 0 {
        0.0
    } else {
        values.sum::<f64>() / len as f64
    }
}

/// Backward regression of the variant's regressand on the exercise-date prices.
pub fn fit_policy(
    paths: &PathBatch,
    z: &PayoffMatrix,
    m: Option<&MartingaleMatrix>,
    config: &PolicyConfig,
) -> Result<PolicyRegressors> {
    check_inputs(paths, z, m)?;
    let variant = config.variant;
    let m = match (variant.needs_martingale_to_fit(), m) {
        (true, None) => return Err(Error::MissingMartingale(variant.tag())),
        (true, Some(m)) => Some(m),
        (false, _) => None,
    };
    let q = paths.len();
    let big_n = z.intervals();
    let d = paths.dim();
    let m_at = |p: usize, n: usize| m.map_or(0.0, |m| m.get(p, n));

    let regressand = |p: usize, n: usize, tau: usize| -> f64 {
        match variant {
            LsVariant::Ls1 => z.get(p, tau),
            LsVariant::Ls2 => z.get(p, tau) - m_at(p, tau) + m_at(p, n),
            LsVariant::Ls2Prime => z.get(p, tau) - m_at(p, tau),
        }
    };
    let exercise_value = |p: usize, n: usize| -> f64 {
        match variant {
            LsVariant::Ls2Prime => z.get(p, n) - m_at(p, n),
            _ => z.get(p, n),
        }
    };

    let mut tau = vec![big_n; q];
    let mut dates = Vec::with_capacity(big_n.saturating_sub(1));
    let mut states = Vec::with_capacity(q * d);
    let mut selected = Vec::with_capacity(q);
    let mut scratch = Vec::new();

    for n in (1..big_n).rev() {
        let f = paths.exercise_index(n);
        selected.clear();
        selected.extend((0..q).filter(|&p| !config.itm_only || z.get(p, n) > 0.0));
        states.clear();
        for &p in &selected {
            states.extend_from_slice(paths.state(p, f));
        }

        let regressor = if selected.is_empty() {
            DateRegressor::constant(0.0, d)
        } else {
            let features = DateFeatures::fit(config.basis, &states, d)?;
            let width = features.len();
            let mut design = DMatrix::zeros(selected.len(), width);
            let mut row = vec![0.0; width];
            for (i, &p) in selected.iter().enumerate() {
                features.features_into(paths.state(p, f), &mut scratch, &mut row);
                for (c, &v) in row.iter().enumerate() {
                    design[(i, c)] = v;
                }
            }
            let targets: Vec<f64> = selected.iter().map(|&p| regressand(p, n, tau[p])).collect();
            let fit = least_squares_fit(&design, &targets)?;
            DateRegressor {
                features,
                coefficients: fit.coefficients,
            }
        };

        let mut row = vec![0.0; regressor.features.len()];
        for &p in &selected {
            regressor.features.features_into(paths.state(p, f), &mut scratch, &mut row);
            let estimate: f64 = row.iter().zip(&regressor.coefficients).map(|(a, b)| a * b).sum();
            if exercise_value(p, n) >= estimate {
                tau[p] = n;
            }
        }
        dates.push(regressor);
    }
    dates.reverse();

    let date0_continuation = mean((0..q).map(|p| regressand(p, 0, tau[p])));
    Ok(PolicyRegressors {
        variant,
        itm_only: config.itm_only,
        dim: d,
        date0_continuation,
        dates,
    })
}

/// Applies frozen regressors to a (typically fresh) sample.
pub fn apply_policy(
    regressors: &PolicyRegressors,
    paths: &PathBatch,
    z: &PayoffMatrix,
    m: Option<&MartingaleMatrix>,
) -> Result<StopTimes> {
    check_inputs(paths, z, m)?;
    let variant = regressors.variant;
    if variant.needs_martingale_to_apply() && m.is_none() {
        return Err(Error::MissingMartingale(variant.tag()));
    }
    if paths.dim() != regressors.dim {
        return Err(Error::DimensionMismatch {
            context: "policy state dimension",
            expected: regressors.dim,
            actual: paths.dim(),
        });
    }
    let big_n = z.intervals();
    if regressors.intervals() != big_n {
        return Err(Error::DimensionMismatch {
            context: "policy exercise dates",
            expected: regressors.intervals(),
            actual: big_n,
        });
    }
    let exercise_value = |p: usize, n: usize| -> f64 {
        match (variant, m) {
            (LsVariant::Ls2Prime, Some(m)) => z.get(p, n) - m.get(p, n),
            _ => z.get(p, n),
        }
    };
    let allowed = |p: usize, n: usize| !regressors.itm_only || z.get(p, n) > 0.0;

    let mut scratch = Vec::new();
    let mut rows: Vec<Vec<f64>> = regressors.dates.iter().map(|r| vec![0.0; r.features.len()]).collect();
    let tau = (0..paths.len())
        .map(|p| {
            if allowed(p, 0) && exercise_value(p, 0) >= regressors.date0_continuation {
                return 0;
            }
            for n in 1..big_n {
                if !allowed(p, n) {
                    continue;
                }
                let r = &regressors.dates[n - 1];
                let row = &mut rows[n - 1];
                r.features.features_into(paths.state(p, paths.exercise_index(n)), &mut scratch, row);
                let estimate: f64 = row.iter().zip(&r.coefficients).map(|(a, b)| a * b).sum();
                if exercise_value(p, n) >= estimate {
                    return n;
                }
            }
            big_n
        })
        .collect();
    Ok(StopTimes { tau })
}

/// Pathwise output of the proxy policy built from a martingale.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyResult {
    /// Random time `tau_0` per path.
    pub tau0: StopTimes,
    /// `U_0` of the pathwise recursion per path.
    pub u0hat: Vec<f64>,
    /// `max_n (Z_n - M_n)` per path.
    pub pathmax: Vec<f64>,
}

/// Runs `U_N = Z_N`, `U_n = max(Z_n, U_{n+1} + M_n - M_{n+1})` on every path.
///
/// The recursion is carried in the shifted variable `V_n = U_n - M_n =
/// max(Z_n - M_n, V_{n+1})`, so `Z_{tau_0} - M_{tau_0}` equals the pathwise
/// maximum bit for bit. `tau_n = n` exactly when `Z_n - M_n >= V_{n+1}`.
pub fn proxy_policy(z: &PayoffMatrix, m: &MartingaleMatrix) -> Result<ProxyResult> {
    if z.len() != m.len() || z.intervals() != m.intervals() {
        return Err(Error::DimensionMismatch {
            context: "proxy policy inputs",
            expected: z.len(),
            actual: m.len(),
        });
    }
    let big_n = z.intervals();
    let q = z.len();
    let mut tau0 = Vec::with_capacity(q);
    let mut u0hat = Vec::with_capacity(q);
    let mut pathmax = Vec::with_capacity(q);
    for p in 0..q {
        let mut v = z.get(p, big_n) - m.get(p, big_n);
        let mut tau = big_n;
        for n in (0..big_n).rev() {
            let here = z.get(p, n) - m.get(p, n);
            if here >= v {
                tau = n;
                v = here;
            }
        }
        tau0.push(tau);
        u0hat.push(v + m.get(p, 0));
        pathmax.push(v);
    }
    Ok(ProxyResult {
        tau0: StopTimes { tau: tau0 },
        u0hat,
        pathmax,
    })
}

/// Counts of `a - b` over `-N..=N`; entry `i` holds difference `i - N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub intervals: usize,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn count(&self, difference: i64) -> u64 {
        let idx = difference + self.intervals as i64;
        if idx < 0 {
            return 0;
        }
        self.counts.get(idx as usize).copied().unwrap_or(0)
    }

    /// Difference with the largest count (smallest on ties).
    pub fn mode(&self) -> i64 {
        let (idx, _) = self
            .counts
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|(_, &c)| c)
            .expect("non-empty histogram");
        idx as i64 - self.intervals as i64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Two-column CSV `difference,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("difference,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i as i64 - self.intervals as i64, c));
        }
        out
    }
}

pub fn policy_histogram(a: &StopTimes, b: &StopTimes, intervals: usize) -> Result<Histogram> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "histogram stop times",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let mut counts = vec![0u64; 2 * intervals + 1];
    for (&x, &y) in a.tau.iter().zip(&b.tau) {
        if x > intervals || y > intervals {
            return Err(Error::DimensionMismatch {
                context: "stop time range",
                expected: intervals,
                actual: x.max(y),
            });
        }
        counts[(x as i64 - y as i64 + intervals as i64) as usize] += 1;
    }
    Ok(Histogram { intervals, counts })
}
