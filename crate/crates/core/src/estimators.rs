//! Price estimators over an evaluation sample.

use crate::dual_martingale::MartingaleMatrix;
use crate::market::PayoffMatrix;
use crate::stopping::StopTimes;
use crate::{Error, Result};

/// A Monte-Carlo price with the standard deviation of the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceEstimate {
    pub mean: f64,
    /// Sample standard deviation divided by `sqrt(q)`; absent when `q < 2`.
    pub stderr: Option<f64>,
    pub samples: usize,
    /// Control-variate coefficient, when one was used.
    pub lambda: Option<f64>,
}

/// Mean and unbiased variance, summed in index order.
pub fn sample_moments(values: &[f64]) -> (f64, Option<f64>) {
    let q = values.len();
    if q == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / q as f64;
    if q < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (q - 1) as f64;
    (mean, Some(var))
}

impl PriceEstimate {
    pub fn from_samples(values: &[f64], lambda: Option<f64>) -> Self {
        let (mean, var) = sample_moments(values);
        Self {
            mean,
            stderr: var.map(|v| (v / values.len() as f64).sqrt()),
            samples: values.len(),
            lambda,
        }
    }

    /// Sample variance of the underlying per-path values.
    pub fn sample_variance(&self) -> Option<f64> {
        self.stderr.map(|s| s * s * self.samples as f64)
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Stopped payoffs `Z_tau` per path.
pub fn stopped_payoffs(z: &PayoffMatrix, tau: &StopTimes) -> Result<Vec<f64>> {
    check_len("stop times vs payoffs", z.len(), tau.len())?;
    if let Some(&bad) = tau.as_slice().iter().find(|&&t| t > z.intervals()) {
        return Err(Error::DimensionMismatch {
            context: "stop time range",
            expected: z.intervals(),
            actual: bad,
        });
    }
    Ok((0..z.len()).map(|p| z.get(p, tau.get(p))).collect())
}

/// Plain Monte-Carlo estimate of `E[Z_tau]`.
pub fn mc_price(z: &PayoffMatrix, tau: &StopTimes) -> Result<PriceEstimate> {
    Ok(PriceEstimate::from_samples(&stopped_payoffs(z, tau)?, None))
}

/// Control-variate estimate `mean(Z_tau - lambda M_tau)` with
/// `lambda = sum Z_tau M_tau / sum M_tau^2` (uncentred).
///
/// Falls back to [`mc_price`] when `M_tau` vanishes on every path.
pub fn cv_price(z: &PayoffMatrix, m: &MartingaleMatrix, tau: &StopTimes) -> Result<PriceEstimate> {
    let stopped = stopped_payoffs(z, tau)?;
    check_len("martingale vs payoffs", z.len(), m.len())?;
    let m_tau: Vec<f64> = (0..m.len()).map(|p| m.get(p, tau.get(p))).collect();
    let denom: f64 = m_tau.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Ok(PriceEstimate::from_samples(&stopped, None));
    }
    let lambda = stopped.iter().zip(&m_tau).map(|(a, b)| a * b).sum::<f64>() / denom;
    let corrected: Vec<f64> = stopped.iter().zip(&m_tau).map(|(a, b)| a - lambda * b).collect();
    Ok(PriceEstimate::from_samples(&corrected, Some(lambda)))
}

/// Pathwise maxima `max_{0 <= j <= N} (Z_j - M_j)`.
pub fn dual_samples(z: &PayoffMatrix, m: &MartingaleMatrix) -> Result<Vec<f64>> {
    check_len("martingale vs payoffs", z.len(), m.len())?;
    check_len("martingale dates", z.intervals(), m.intervals())?;
    Ok((0..z.len())
        .map(|p| {
            z.row(p)
                .iter()
                .zip(m.row(p))
                .map(|(a, b)| a - b)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Dual upper-bound estimate.
pub fn dual_price(z: &PayoffMatrix, m: &MartingaleMatrix) -> Result<PriceEstimate> {
    Ok(PriceEstimate::from_samples(&dual_samples(z, m)?, None))
}

/// Within-run versus across-run variability of repeated estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    /// Mean over runs of the per-run sample variance.
    pub within_run_var: f64,
    /// `q` times the across-run variance of the run means.
    pub total_var: f64,
    pub runs: usize,
    /// Mean per-run sample count.
    pub samples: f64,
}

impl VarianceDecomposition {
    /// Estimator-scale standard deviation seen inside a single run.
    pub fn within_stderr(&self) -> f64 {
        (self.within_run_var / self.samples).sqrt()
    }

    /// Standard deviation of the run means.
    pub fn total_stderr(&self) -> f64 {
        (self.total_var / self.samples).sqrt()
    }

    /// Monte-Carlo error of [`Self::total_stderr`] itself, `s / sqrt(2 (R - 1))`.
    pub fn total_stderr_error(&self) -> f64 {
        self.total_stderr() / (2.0 * (self.runs - 1) as f64).sqrt()
    }
}

pub fn variance_decomposition(runs: &[Vec<f64>]) -> Result<VarianceDecomposition> {
    if runs.len() < 2 {
        return Err(Error::InsufficientRuns {
            needed: 2,
            got: runs.len(),
        });
    }
    if let Some(short) = runs.iter().find(|r| r.len() < 2) {
        return Err(Error::InsufficientRuns {
            needed: 2,
            got: short.len(),
        });
    }
    let mut means = Vec::with_capacity(runs.len());
    let mut within = 0.0;
    for r in runs {
        let (mean, var) = sample_moments(r);
        means.push(mean);
        within += var.unwrap_or(0.0);
    }
    let samples = runs.iter().map(|r| r.len() as f64).sum::<f64>() / runs.len() as f64;
    let (_, across) = sample_moments(&means);
    Ok(VarianceDecomposition {
        within_run_var: within / runs.len() as f64,
        total_var: samples * across.unwrap_or(0.0),
        runs: runs.len(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(q: usize, n: usize, seed: u64) -> (PayoffMatrix, MartingaleMatrix, StopTimes) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dates = n + 1;
        let z: Vec<f64> = (0..q * dates).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut m = vec![0.0; q * dates];
        for p in 0..q {
            for k in 1..dates {
                m[p * dates + k] = m[p * dates + k - 1] + rng.random_range(-1.0..1.0);
            }
        }
        let tau = (0..q).map(|_| rng.random_range(0..=n)).collect();
        (
            PayoffMatrix::from_rows(q, dates, z).unwrap(),
            MartingaleMatrix::from_rows(q, dates, m).unwrap(),
            StopTimes::new(tau),
        )
    }

    #[test]
    fn constant_payoff_has_zero_stderr() {
        let z = PayoffMatrix::from_rows(50, 3, vec![2.5; 150]).unwrap();
        let est = mc_price(&z, &StopTimes::constant(50, 1)).unwrap();
        assert_eq!(est.mean, 2.5);
        assert_eq!(est.stderr, Some(0.0));
    }

    #[test]
    fn single_sample_has_no_stderr() {
        let z = PayoffMatrix::from_rows(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(mc_price(&z, &StopTimes::constant(1, 1)).unwrap().stderr, None);
    }

    #[test]
    fn zero_martingale_falls_back_to_plain_price() {
        let (z, _, tau) = random_inputs(100, 4, 1);
        let m = MartingaleMatrix::zeros(100, 4);
        assert_eq!(cv_price(&z, &m, &tau).unwrap(), mc_price(&z, &tau).unwrap());
    }

    #[test]
    fn dual_of_deterministic_payoff_without_martingale() {
        let z = PayoffMatrix::from_rows(3, 3, vec![1.0, 4.0, 2.0, 1.0, 4.0, 2.0, 1.0, 4.0, 2.0]).unwrap();
        let est = dual_price(&z, &MartingaleMatrix::zeros(3, 2)).unwrap();
        assert_eq!(est.mean, 4.0);
        assert_eq!(est.stderr, Some(0.0));
    }

    #[test]
    fn translation_shifts_cv_mean() {
        let (z, m, tau) = random_inputs(400, 5, 2);
        let base = cv_price(&z, &m, &tau).unwrap();
        let shifted = cv_price(&z.shifted(3.0), &m, &tau).unwrap();
        let lam_b = base.lambda.unwrap();
        let lam_s = shifted.lambda.unwrap();
        let m_tau_mean: f64 = (0..400).map(|p| m.get(p, tau.get(p))).sum::<f64>() / 400.0;
        // mean(Z + c - lam_s M) = mean(Z - lam_b M) + c - (lam_s - lam_b) mean(M)
        let expected = base.mean + 3.0 - (lam_s - lam_b) * m_tau_mean;
        assert!((shifted.mean - expected).abs() < 1e-10);
    }

    #[test]
    fn estimators_are_permutation_invariant() {
        let (z, m, tau) = random_inputs(64, 3, 3);
        let perm: Vec<usize> = (0..64).rev().collect();
        let zr: Vec<f64> = perm.iter().flat_map(|&p| z.row(p).to_vec()).collect();
        let mr: Vec<f64> = perm.iter().flat_map(|&p| m.row(p).to_vec()).collect();
        let tr: Vec<usize> = perm.iter().map(|&p| tau.get(p)).collect();
        let z2 = PayoffMatrix::from_rows(64, 4, zr).unwrap();
        let m2 = MartingaleMatrix::from_rows(64, 4, mr).unwrap();
        let t2 = StopTimes::new(tr);
        let a = cv_price(&z, &m, &tau).unwrap();
        let b = cv_price(&z2, &m2, &t2).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
        assert!((dual_price(&z, &m).unwrap().mean - dual_price(&z2, &m2).unwrap().mean).abs() < 1e-12);
    }

    #[test]
    fn decomposition_requires_two_runs() {
        assert!(variance_decomposition(&[vec![1.0, 2.0]]).is_err());
        let d = variance_decomposition(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(d.within_run_var, 2.0);
        assert_eq!(d.total_var, 2.0 * 0.5);
    }

    proptest::proptest! {
        #[test]
        fn lambda_minimises_uncentred_second_moment(seed in 0u64..1000) {
            let (z, m, tau) = random_inputs(50, 4, seed);
            let plain = mc_price(&z, &tau).unwrap();
            let cv = cv_price(&z, &m, &tau).unwrap();
            let zt = stopped_payoffs(&z, &tau).unwrap();
            let lam = cv.lambda.unwrap();
            let second = |l: f64| (0..50).map(|p| (zt[p] - l * m.get(p, tau.get(p))).powi(2)).sum::<f64>();
            proptest::prop_assert!(second(lam) <= second(0.0) + 1e-9);
            proptest::prop_assert!(second(lam) <= second(lam + 0.01) + 1e-9);
            proptest::prop_assert!(second(lam) <= second(lam - 0.01) + 1e-9);
            proptest::prop_assert!(plain.stderr.unwrap() >= 0.0);
        }
    }
}
