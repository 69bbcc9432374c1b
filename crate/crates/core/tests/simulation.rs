//! Statistical properties of simulated paths and fitted martingales.

use bermudan_dual::dual_martingale::{
    elementary_increments, evaluate_martingale, fit_dual_coefficients, IncrementBasis, SubtickLayout,
};
use bermudan_dual::estimators::{mc_price, sample_moments};
use bermudan_dual::market::{
    discounted_payoffs, european_put_closed_form, simulate_paths, ModelSpec, PayoffSpec,
};
use bermudan_dual::stopping::{apply_policy, fit_policy, LsVariant, PolicyBasis, PolicyConfig, StopTimes};

fn assert_zero_mean(values: &[f64], what: &str) {
    let (mean, var) = sample_moments(values);
    let se = (var.unwrap() / values.len() as f64).sqrt();
    assert!(mean.abs() <= 4.0 * se + 1e-14, "{what}: mean {mean} se {se}");
}

fn put_model(subticks: usize) -> ModelSpec {
    ModelSpec::single(100.0, 0.06, 0.4, 0.5, 10, subticks)
}

#[test]
fn european_put_matches_black_scholes() {
    let model = put_model(1);
    let paths = simulate_paths(&model, 100_000, 17).unwrap();
    let z = discounted_payoffs(&paths, &PayoffSpec::Put { strike: 100.0 }).unwrap();
    let est = mc_price(&z, &StopTimes::constant(paths.len(), 10)).unwrap();
    let exact = european_put_closed_form(100.0, 100.0, 0.06, 0.4, 0.5);
    assert!((est.mean - exact).abs() < 4.0 * est.stderr.unwrap(), "{} vs {exact}", est.mean);
}

#[test]
fn discounted_tradables_are_martingales() {
    let mut model = put_model(3);
    model.spot = vec![100.0, 90.0];
    model.volatility = vec![0.2, 0.3];
    model.dividends = vec![0.1, 0.0];
    let paths = simulate_paths(&model, 50_000, 5).unwrap();
    let last = paths.grid_len() - 1;
    for k in 0..2 {
        let moves: Vec<f64> = (0..paths.len())
            .map(|p| paths.tradable(p, last, k) - paths.tradable(p, 0, k))
            .collect();
        assert_zero_mean(&moves, "tradable");
    }
}

#[test]
fn elementary_increments_have_zero_mean() {
    let model = put_model(2);
    let fit = simulate_paths(&model, 2_000, 1).unwrap();
    let fresh = simulate_paths(&model, 100_000, 2).unwrap();
    for layout in [SubtickLayout::Shared, SubtickLayout::PerSubtick] {
        let basis = IncrementBasis::from_paths(&fit, 8, layout).unwrap();
        let l = basis.len();
        for n in [0, 4, 9] {
            let dx = elementary_increments(&fresh, &basis, n).unwrap();
            for i in 0..l {
                let column: Vec<f64> = dx.iter().skip(i).step_by(l).copied().collect();
                if column.iter().any(|v| *v != 0.0) {
                    assert_zero_mean(&column, "increment");
                }
            }
        }
    }
}

#[test]
fn fitted_martingale_is_centred_out_of_sample() {
    let model = put_model(2);
    let payoff = PayoffSpec::Put { strike: 100.0 };
    let fit = simulate_paths(&model, 20_000, 11).unwrap();
    let z_fit = discounted_payoffs(&fit, &payoff).unwrap();
    let basis = IncrementBasis::from_paths(&fit, 20, SubtickLayout::Shared).unwrap();
    let dm = fit_dual_coefficients(&fit, &z_fit, basis).unwrap();

    let policy_paths = simulate_paths(&model, 20_000, 12).unwrap();
    let z_policy = discounted_payoffs(&policy_paths, &payoff).unwrap();
    let policy = fit_policy(
        &policy_paths,
        &z_policy,
        None,
        &PolicyConfig::new(LsVariant::Ls1, PolicyBasis::Polynomial { degree: 4 }),
    )
    .unwrap();

    let eval = simulate_paths(&model, 50_000, 13).unwrap();
    let z = discounted_payoffs(&eval, &payoff).unwrap();
    let m = evaluate_martingale(&dm, &eval).unwrap();
    let terminal: Vec<f64> = (0..m.len()).map(|p| m.get(p, 10)).collect();
    assert_zero_mean(&terminal, "M_N");

    // optional stopping at an adapted time
    let tau = apply_policy(&policy, &eval, &z, None).unwrap();
    let stopped: Vec<f64> = (0..m.len()).map(|p| m.get(p, tau.get(p))).collect();
    assert_zero_mean(&stopped, "M_tau");
    assert!((0..m.len()).all(|p| m.get(p, 0) == 0.0));
}

#[test]
fn same_seed_gives_identical_paths() {
    let model = put_model(3);
    let a = simulate_paths(&model, 500, 99).unwrap();
    let b = simulate_paths(&model, 500, 99).unwrap();
    let c = simulate_paths(&model, 500, 100).unwrap();
    assert_eq!(a.path(123), b.path(123));
    assert_ne!(a.path(123), c.path(123));
}

#[test]
fn path_stream_does_not_depend_on_batch_size() {
    let model = put_model(2);
    let small = simulate_paths(&model, 10, 7).unwrap();
    let large = simulate_paths(&model, 1_000, 7).unwrap();
    for p in 0..10 {
        assert_eq!(small.path(p), large.path(p));
    }
}
