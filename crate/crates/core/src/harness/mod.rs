//! Experiment orchestration: the three-sample protocol, repeated runs,
//! result tables, exercise-time histograms and the exact oracle suite.

mod config;

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

pub use config::{AlgorithmConfig, ExperimentConfig, MarketConfig, SampleSet, SeedConfig, SeedPlan};

use crate::dual_martingale::{
    evaluate_martingale, fit_dual_coefficients, DualMartingale, IncrementBasis, MartingaleMatrix, SubtickLayout,
};
use crate::estimators::{
    cv_price, dual_price, dual_samples, mc_price, sample_moments, stopped_payoffs, variance_decomposition, PriceEstimate,
    VarianceDecomposition,
};
use crate::market::{discounted_payoffs, simulate_paths, PathBatch, PayoffMatrix, PayoffSpec};
use crate::oracle::{
    enumerate_paths, exact_identity_checks, path_values, proxy_identity_error, solve_tree, solve_tree_with, TreeModel,
    IDENTITY_TOLERANCE,
};
use crate::regression::LocalBasis;
use crate::stopping::{
    apply_policy, fit_policy, policy_histogram, proxy_policy, Histogram, LsVariant, PolicyBasis, PolicyConfig,
    StopTimes,
};
use crate::{Error, Result};

/// Fits the dual martingale on the first sample set of `run`.
pub fn fit_martingale(config: &ExperimentConfig, run: usize) -> Result<DualMartingale> {
    config.validate()?;
    let seed = config.seed_plan().seed(SampleSet::MartingaleFit, run);
    let paths = simulate_paths(&config.model_spec(), config.algorithm.q1, seed)?;
    let z = discounted_payoffs(&paths, &config.payoff)?;
    let basis = IncrementBasis::from_paths(&paths, config.algorithm.p_local, config.algorithm.subtick_layout)?;
    fit_dual_coefficients(&paths, &z, basis)
}

fn policy_config(config: &ExperimentConfig, variant: LsVariant) -> PolicyConfig {
    PolicyConfig {
        variant,
        basis: PolicyBasis::Polynomial {
            degree: config.algorithm.ls_degree,
        },
        itm_only: config.algorithm.itm_only,
    }
}

/// Estimates of one variant in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    pub variant: LsVariant,
    /// Plain Longstaff–Schwartz price.
    pub plain: PriceEstimate,
    /// Control-variate price.
    pub cv: PriceEstimate,
    /// Stopped payoffs `Z_tau` on the evaluation sample.
    pub stopped: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub dual: PriceEstimate,
    pub variants: Vec<VariantRun>,
}

struct Sample {
    paths: PathBatch,
    z: PayoffMatrix,
    m: MartingaleMatrix,
}

fn sample(config: &ExperimentConfig, dm: &DualMartingale, set: SampleSet, run: usize, q: usize) -> Result<Sample> {
    let seed = config.seed_plan().seed(set, run);
    let paths = simulate_paths(&config.model_spec(), q, seed)?;
    let z = discounted_payoffs(&paths, &config.payoff)?;
    let m = evaluate_martingale(dm, &paths)?;
    Ok(Sample { paths, z, m })
}

fn check_weak_duality(dual: &PriceEstimate, primal: &PriceEstimate) -> Result<()> {
    let stderr = (dual.stderr.unwrap_or(0.0).powi(2) + primal.stderr.unwrap_or(0.0).powi(2)).sqrt();
    if dual.mean < primal.mean - 3.0 * stderr {
        return Err(Error::WeakDuality {
            dual: dual.mean,
            primal: primal.mean,
            stderr,
        });
    }
    Ok(())
}

/// One repetition: fit policies on the second set, price on the third.
pub fn run_once(config: &ExperimentConfig, dm: &DualMartingale, run: usize) -> Result<RunResult> {
    let refreshed;
    let dm = if config.algorithm.refresh_q1 && run > 0 {
        refreshed = fit_martingale(config, run)?;
        &refreshed
    } else {
        dm
    };
    let fit = sample(config, dm, SampleSet::PolicyFit, run, config.algorithm.q2)?;
    let eval = sample(config, dm, SampleSet::Evaluation, run, config.algorithm.q3)?;
    let dual = dual_price(&eval.z, &eval.m)?;
    let mut variants = Vec::new();
    for variant in config.variants() {
        let policy = fit_policy(&fit.paths, &fit.z, Some(&fit.m), &policy_config(config, variant))?;
        let tau = apply_policy(&policy, &eval.paths, &eval.z, Some(&eval.m))?;
        let cv = cv_price(&eval.z, &eval.m, &tau)?;
        check_weak_duality(&dual, &cv)?;
        variants.push(VariantRun {
            variant,
            plain: mc_price(&eval.z, &tau)?,
            cv,
            stopped: stopped_payoffs(&eval.z, &tau)?,
        });
    }
    Ok(RunResult { run, dual, variants })
}

/// One output line; mirrors the layout of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment_id: String,
    pub method: String,
    pub price: f64,
    /// Standard deviation of the price across runs.
    pub stddev: Option<f64>,
    pub lambda: Option<f64>,
    pub dual_price: f64,
    pub dual_stddev: Option<f64>,
    /// Mean within-run standard error of the price.
    pub within_stderr: Option<f64>,
    pub q1: usize,
    pub q2: usize,
    pub q3: usize,
    pub nbar: usize,
    pub p_local: usize,
    pub runs: usize,
    pub seconds: f64,
}

pub const CSV_HEADER: &str =
    "experiment_id,method,price,stddev,lambda,dual_price,dual_stddev,q1,q2,q3,nbar,p_local,runs,seconds";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl ResultRow {
    /// CSV line in [`CSV_HEADER`] order. Without timing the `seconds`
    /// column is `NA`, which makes output byte-reproducible.
    pub fn to_csv(&self, timing: bool) -> String {
        format!(
            "{},{},{:.6},{},{},{:.6},{},{},{},{},{},{},{},{}",
            self.experiment_id,
            self.method,
            self.price,
            opt(self.stddev),
            opt(self.lambda),
            self.dual_price,
            opt(self.dual_stddev),
            self.q1,
            self.q2,
            self.q3,
            self.nbar,
            self.p_local,
            self.runs,
            if timing { format!("{:.3}", self.seconds) } else { "NA".into() }
        )
    }
}

pub fn rows_to_csv(rows: &[ResultRow], timing: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv(timing));
        out.push('\n');
    }
    out
}

/// Fixed-width table in the style of the CSV, for terminals.
pub fn rows_to_table(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<16} {:>9} {:>8} {:>7} {:>9} {:>8}",
        "experiment", "method", "price", "stddev", "lambda", "dual", "stddev"
    );
    let na = |v: Option<f64>, prec: usize| v.map_or("NA".to_string(), |x| format!("{x:.prec$}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:<16} {:>9.4} {:>8} {:>7} {:>9.4} {:>8}",
            r.experiment_id,
            r.method,
            r.price,
            na(r.stddev, 4),
            na(r.lambda, 4),
            r.dual_price,
            na(r.dual_stddev, 4)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn row(&self, method: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn across_runs(values: &[f64]) -> (f64, Option<f64>) {
    let (mean, var) = sample_moments(values);
    (mean, var.map(f64::sqrt))
}

/// Runs the full protocol. The martingale is fitted on the first sample set
/// unless one is supplied.
pub fn run_experiment(config: &ExperimentConfig, martingale: Option<&DualMartingale>) -> Result<ExperimentResult> {
    config.validate()?;
    let start = Instant::now();
    let fitted;
    let dm = match martingale {
        Some(dm) => dm,
        None => {
            fitted = fit_martingale(config, 0)?;
            &fitted
        }
    };
    let runs: Vec<RunResult> = (0..config.algorithm.runs)
        .into_par_iter()
        .map(|run| run_once(config, dm, run).map_err(|e| Error::Run { run, source: Box::new(e) }))
        .collect::<Result<_>>()?;
    let seconds = start.elapsed().as_secs_f64();

    let a = &config.algorithm;
    let duals: Vec<f64> = runs.iter().map(|r| r.dual.mean).collect();
    let (dual_price, dual_stddev) = across_runs(&duals);
    let row = |method: String, estimates: Vec<PriceEstimate>| {
        let means: Vec<f64> = estimates.iter().map(|e| e.mean).collect();
        let (price, stddev) = across_runs(&means);
        let lambdas: Vec<f64> = estimates.iter().filter_map(|e| e.lambda).collect();
        let stderrs: Vec<f64> = estimates.iter().filter_map(|e| e.stderr).collect();
        ResultRow {
            experiment_id: config.id.clone(),
            method,
            price,
            stddev,
            lambda: (!lambdas.is_empty()).then(|| lambdas.iter().sum::<f64>() / lambdas.len() as f64),
            dual_price,
            dual_stddev,
            within_stderr: (!stderrs.is_empty()).then(|| stderrs.iter().sum::<f64>() / stderrs.len() as f64),
            q1: a.q1,
            q2: a.q2,
            q3: a.q3,
            nbar: a.nbar,
            p_local: a.p_local,
            runs: a.runs,
            seconds,
        }
    };
    let mut rows = Vec::new();
    for (i, variant) in config.variants().into_iter().enumerate() {
        let plain = runs.iter().map(|r| r.variants[i].plain).collect();
        let cv = runs.iter().map(|r| r.variants[i].cv).collect();
        rows.push(row(format!("{variant}-plain"), plain));
        rows.push(row(format!("{variant}-cv"), cv));
    }
    Ok(ExperimentResult { rows, runs })
}

/// Repeated plain Longstaff–Schwartz runs with the first configured variant.
///
/// With `frozen_policy` the policy is fitted once (run 0) and only the
/// evaluation sample changes between runs.
pub fn variance_study(config: &ExperimentConfig, frozen_policy: bool) -> Result<VarianceDecomposition> {
    config.validate()?;
    let dm = fit_martingale(config, 0)?;
    let variant = config.variants()[0];
    let policy_for = |run: usize| -> Result<_> {
        let fit = sample(config, &dm, SampleSet::PolicyFit, run, config.algorithm.q2)?;
        fit_policy(&fit.paths, &fit.z, Some(&fit.m), &policy_config(config, variant))
    };
    let frozen = if frozen_policy { Some(policy_for(0)?) } else { None };
    let samples: Vec<Vec<f64>> = (0..config.algorithm.runs)
        .into_par_iter()
        .map(|run| -> Result<Vec<f64>> {
            let owned;
            let policy = match &frozen {
                Some(p) => p,
                None => {
                    owned = policy_for(run)?;
                    &owned
                }
            };
            let eval = sample(config, &dm, SampleSet::Evaluation, run, config.algorithm.q3)?;
            let tau = apply_policy(policy, &eval.paths, &eval.z, Some(&eval.m))?;
            stopped_payoffs(&eval.z, &tau)
        })
        .collect::<Result<_>>()?;
    variance_decomposition(&samples)
}

/// Proxy exercise times versus the Longstaff–Schwartz rule on the evaluation
/// sample of run 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramResult {
    pub histogram: Histogram,
    pub proxy_mean: f64,
    pub dual: PriceEstimate,
}

pub fn run_histogram(config: &ExperimentConfig, martingale: Option<&DualMartingale>) -> Result<HistogramResult> {
    config.validate()?;
    let fitted;
    let dm = match martingale {
        Some(dm) => dm,
        None => {
            fitted = fit_martingale(config, 0)?;
            &fitted
        }
    };
    let fit = sample(config, dm, SampleSet::PolicyFit, 0, config.algorithm.q2)?;
    let eval = sample(config, dm, SampleSet::Evaluation, 0, config.algorithm.q3)?;
    let policy = fit_policy(&fit.paths, &fit.z, None, &policy_config(config, LsVariant::Ls1))?;
    let tau_ls = apply_policy(&policy, &eval.paths, &eval.z, None)?;
    let proxy = proxy_policy(&eval.z, &eval.m)?;
    let histogram = policy_histogram(&proxy.tau0, &tau_ls, config.model.exercise_dates)?;
    let proxy_values: Vec<f64> = (0..eval.z.len())
        .map(|p| {
            let t = proxy.tau0.get(p);
            eval.z.get(p, t) - eval.m.get(p, t)
        })
        .collect();
    Ok(HistogramResult {
        histogram,
        proxy_mean: sample_moments(&proxy_values).0,
        dual: dual_price(&eval.z, &eval.m)?,
    })
}

/// Exact single-tree world: all `2^N` equally likely paths with the Doob
/// martingale and optimal exercise times along each.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactWorld {
    pub value: f64,
    pub paths: PathBatch,
    pub z: PayoffMatrix,
    pub m_star: MartingaleMatrix,
    pub tau_star: StopTimes,
}

pub fn exact_world(tree: &TreeModel, payoff: &PayoffSpec) -> Result<ExactWorld> {
    let (paths, z, m_star) = crate::oracle::enumerated_batch(tree, payoff)?;
    let solution = solve_tree(tree, payoff)?;
    let tau = enumerate_paths(tree)?
        .iter()
        .map(|p| path_values(&solution, p).optimal_stop)
        .collect();
    Ok(ExactWorld {
        value: solution.value(),
        paths,
        z,
        m_star,
        tau_star: StopTimes::new(tau),
    })
}

/// Local basis with one cell per tree node at every date.
pub fn node_basis(tree: &TreeModel) -> Result<IncrementBasis> {
    let locals = (0..tree.steps)
        .map(|n| {
            let prices: Vec<f64> = (0..=n).map(|j| tree.price(n, j)).collect();
            let mids = prices.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            LocalBasis::from_breakpoints(tree.steps + 1, vec![mids])
        })
        .collect::<Result<Vec<_>>>()?;
    IncrementBasis::new(tree.steps, 1, SubtickLayout::Shared, locals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> SuiteCheck {
    SuiteCheck {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Exhaustive checks on small binomial trees.
pub fn run_oracle_suite() -> Result<Vec<SuiteCheck>> {
    let put = PayoffSpec::Put { strike: 100.0 };
    let mut out = Vec::new();
    for steps in [3usize, 5] {
        let tree = TreeModel::symmetric(steps, 100.0, 1.01, 0.1);
        let sol = solve_tree(&tree, &put)?;
        let report = exact_identity_checks(&tree, &sol)?;
        for c in &report.checks {
            out.push(check(
                format!("put_n{steps}/{}", c.name),
                c.passed,
                format!("max error {:.3e}", c.max_error),
            ));
        }

        let world = exact_world(&tree, &put)?;
        let dual = dual_price(&world.z, &world.m_star)?;
        out.push(check(
            format!("put_n{steps}/dual_with_exact_martingale"),
            (dual.mean - world.value).abs() < 1e-10 && dual.stderr.unwrap_or(0.0) < 1e-10,
            format!("dual {:.12} vs value {:.12}", dual.mean, world.value),
        ));
        let cv = cv_price(&world.z, &world.m_star, &world.tau_star)?;
        out.push(check(
            format!("put_n{steps}/control_variate_with_exact_pair"),
            (cv.mean - world.value).abs() < 1e-10
                && cv.stderr.unwrap_or(0.0) < 1e-10
                && cv.lambda.is_none_or(|l| (l - 1.0).abs() < 1e-10),
            format!("cv {:.12} stderr {:.3e} lambda {:?}", cv.mean, cv.stderr.unwrap_or(0.0), cv.lambda),
        ));
        let proxy = proxy_policy(&world.z, &world.m_star)?;
        out.push(check(
            format!("put_n{steps}/proxy_time_is_optimal"),
            proxy.tau0 == world.tau_star,
            "random time built from the exact martingale vs optimal stopping time",
        ));

        // corrupt the martingale with extra mean-zero node increments
        let q = world.z.len();
        let dates = steps + 1;
        let mut noisy = Vec::with_capacity(q * dates);
        for p in 0..q {
            let mut acc = 0.0;
            noisy.push(0.0);
            for n in 1..dates {
                let up = world.paths.state(p, n)[0] > world.paths.state(p, n - 1)[0];
                acc += if up { 0.3 } else { -0.3 };
                noisy.push(world.m_star.get(p, n) + acc);
            }
        }
        let noisy = MartingaleMatrix::from_rows(q, dates, noisy)?;
        let corrupted = dual_price(&world.z, &noisy)?;
        out.push(check(
            format!("put_n{steps}/corrupted_martingale_overprices"),
            corrupted.mean > world.value + 1e-12,
            format!("dual {:.12} vs value {:.12}", corrupted.mean, world.value),
        ));

        let half = MartingaleMatrix::from_rows(
            q,
            dates,
            (0..q).flat_map(|p| world.m_star.row(p).iter().map(|v| 0.5 * v)).collect(),
        )?;
        let injected = [
            ("exact", &world.m_star),
            ("corrupted", &noisy),
            ("half", &half),
            ("zero", &MartingaleMatrix::zeros(q, steps)),
        ];
        for (label, m) in injected {
            let err = proxy_identity_error(&world.z, m);
            out.push(check(
                format!("put_n{steps}/proxy_identity_{label}_martingale"),
                err <= IDENTITY_TOLERANCE,
                format!("max error {err:.3e}"),
            ));
            let proxy = proxy_policy(&world.z, m)?;
            let dual = dual_samples(&world.z, m)?;
            let exact = (0..q).all(|p| {
                let t = proxy.tau0.get(p);
                world.z.get(p, t) - m.get(p, t) == dual[p]
            });
            out.push(check(
                format!("put_n{steps}/proxy_time_attains_pathmax_{label}"),
                exact,
                "Z - M at the proxy time vs pathwise maximum",
            ));
        }

        let dm = fit_dual_coefficients(&world.paths, &world.z, node_basis(&tree)?)?;
        let fitted = evaluate_martingale(&dm, &world.paths)?;
        let err = (0..q)
            .flat_map(|p| (0..dates).map(move |n| (p, n)))
            .map(|(p, n)| (fitted.get(p, n) - world.m_star.get(p, n)).abs())
            .fold(0.0, f64::max);
        out.push(check(
            format!("put_n{steps}/least_squares_recovers_doob_martingale"),
            err < 1e-8,
            format!("max error {err:.3e}"),
        ));
    }

    let tree = TreeModel::symmetric(3, 100.0, 1.01, 0.1);
    let zero = solve_tree_with(&tree, |_| 0.0)?;
    let report = exact_identity_checks(&tree, &zero)?;
    out.push(check(
        "zero_payoff/all_identities",
        report.passed(),
        format!("{} checks", report.checks.len()),
    ));
    Ok(out)
}

pub fn suite_to_csv(checks: &[SuiteCheck]) -> String {
    let mut out = String::from("check,status,detail\n");
    for c in checks {
        let _ = writeln!(out, "{},{},{}", c.name, if c.passed { "pass" } else { "fail" }, c.detail.replace(',', ";"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(runs: usize) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
id = "small"
[model]
spot = [100.0]
rate = 0.06
volatility = [0.4]
maturity = 0.5
exercise_dates = 5
[payoff]
kind = "put"
strike = 100.0
[algorithm]
q1 = 4000
q2 = 2000
q3 = 2000
nbar = 2
p_local = 10
ls_degree = 3
runs = {runs}
"#
        ))
        .unwrap()
    }

    #[test]
    fn single_run_has_no_stddev() {
        let res = run_experiment(&small_config(1), None).unwrap();
        assert_eq!(res.rows.len(), 4);
        assert!(res.rows.iter().all(|r| r.stddev.is_none() && r.dual_stddev.is_none()));
        assert!(res.rows[0].to_csv(false).contains(",NA,"));
    }

    #[test]
    fn output_is_reproducible() {
        let a = run_experiment(&small_config(2), None).unwrap();
        let b = run_experiment(&small_config(2), None).unwrap();
        assert_eq!(rows_to_csv(&a.rows, false), rows_to_csv(&b.rows, false));
        assert_eq!(a.runs, b.runs);
    }

    #[test]
    fn refreshing_the_fit_sample_changes_later_runs_only() {
        let mut cfg = small_config(2);
        let base = run_experiment(&cfg, None).unwrap();
        cfg.algorithm.refresh_q1 = true;
        let refreshed = run_experiment(&cfg, None).unwrap();
        assert_eq!(base.runs[0], refreshed.runs[0]);
        assert_ne!(base.runs[1].dual, refreshed.runs[1].dual);
    }

    #[test]
    fn supplied_martingale_matches_fitted_one() {
        let cfg = small_config(1);
        let dm = fit_martingale(&cfg, 0).unwrap();
        assert_eq!(run_experiment(&cfg, Some(&dm)).unwrap().runs, run_experiment(&cfg, None).unwrap().runs);
    }

    #[test]
    fn identical_policies_histogram_at_zero() {
        let h = policy_histogram(&StopTimes::constant(5, 2), &StopTimes::constant(5, 2), 4).unwrap();
        assert_eq!(h.count(0), 5);
    }

    #[test]
    fn histogram_proxy_mean_equals_dual() {
        let res = run_histogram(&small_config(1), None).unwrap();
        assert_eq!(res.proxy_mean, res.dual.mean);
        assert_eq!(res.histogram.total(), 2000);
    }

    #[test]
    fn oracle_suite_passes() {
        let checks = run_oracle_suite().unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(suite_to_csv(&checks).lines().count() > 20);
    }
}
