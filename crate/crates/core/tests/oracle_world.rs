//! Exact checks on enumerated binomial trees, where sample averages over all
//! `2^N` equally likely paths are expectations.

use bermudan_dual::dual_martingale::{evaluate_martingale, fit_dual_coefficients, MartingaleMatrix};
use bermudan_dual::estimators::{cv_price, dual_price, mc_price};
use bermudan_dual::harness::{exact_world, node_basis, run_oracle_suite};
use bermudan_dual::market::PayoffSpec;
use bermudan_dual::oracle::{exact_identity_checks, proxy_identity_error, solve_tree, TreeModel};
use bermudan_dual::stopping::{
    apply_policy, fit_policy, policy_histogram, proxy_policy, LsVariant, PolicyBasis, PolicyConfig,
};

fn put() -> PayoffSpec {
    PayoffSpec::Put { strike: 100.0 }
}

fn trees() -> Vec<TreeModel> {
    vec![
        TreeModel::symmetric(3, 100.0, 1.01, 0.1),
        TreeModel::symmetric(5, 100.0, 1.01, 0.1),
        TreeModel::symmetric(8, 95.0, 1.005, 0.07),
    ]
}

#[test]
fn identities_hold_for_puts_and_butterflies() {
    let fly = PayoffSpec::Butterfly {
        low_strike: 90.0,
        high_strike: 110.0,
    };
    for tree in trees() {
        for payoff in [put(), fly] {
            let sol = solve_tree(&tree, &payoff).unwrap();
            let report = exact_identity_checks(&tree, &sol).unwrap();
            assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
        }
    }
}

#[test]
fn exact_martingale_gives_exact_estimators() {
    for tree in trees() {
        let w = exact_world(&tree, &put()).unwrap();
        let dual = dual_price(&w.z, &w.m_star).unwrap();
        assert!((dual.mean - w.value).abs() < 1e-10);
        assert!(dual.stderr.unwrap() < 1e-10);
        let cv = cv_price(&w.z, &w.m_star, &w.tau_star).unwrap();
        assert!((cv.mean - w.value).abs() < 1e-10);
        assert!((cv.lambda.unwrap() - 1.0).abs() < 1e-10);
        // the optimal time is unbiased on the enumerated sample
        assert!((mc_price(&w.z, &w.tau_star).unwrap().mean - w.value).abs() < 1e-10);
    }
}

#[test]
fn fitted_martingale_is_the_doob_martingale() {
    for tree in trees() {
        let w = exact_world(&tree, &put()).unwrap();
        let dm = fit_dual_coefficients(&w.paths, &w.z, node_basis(&tree).unwrap()).unwrap();
        let m = evaluate_martingale(&dm, &w.paths).unwrap();
        for p in 0..m.len() {
            for n in 0..=tree.steps {
                assert!((m.get(p, n) - w.m_star.get(p, n)).abs() < 1e-8, "path {p} date {n}");
            }
        }
    }
}

#[test]
fn local_ls1_reproduces_dynamic_programming() {
    for tree in trees() {
        let w = exact_world(&tree, &put()).unwrap();
        let q = w.z.len();
        let config = PolicyConfig::new(LsVariant::Ls1, PolicyBasis::Local { bins: q });
        let policy = fit_policy(&w.paths, &w.z, None, &config).unwrap();
        let tau = apply_policy(&policy, &w.paths, &w.z, None).unwrap();
        // ties between exercise and continuation may resolve either way in
        // floating point, so compare stopped payoffs rather than times
        assert!((mc_price(&w.z, &tau).unwrap().mean - w.value).abs() < 1e-10);
        for p in 0..q {
            let (a, b) = (tau.get(p), w.tau_star.get(p));
            assert!(a == b || (w.z.get(p, a) - w.z.get(p, b)).abs() < 1e-10 || a > b, "path {p}");
        }

        // with the exact martingale the proxy time is the optimal time
        let proxy = proxy_policy(&w.z, &w.m_star).unwrap();
        let h = policy_histogram(&proxy.tau0, &w.tau_star, tree.steps).unwrap();
        assert_eq!(h.count(0), q as u64);
    }
}

#[test]
fn ls2_with_exact_martingale_matches_too() {
    let tree = TreeModel::symmetric(5, 100.0, 1.01, 0.1);
    let w = exact_world(&tree, &put()).unwrap();
    let config = PolicyConfig::new(LsVariant::Ls2, PolicyBasis::Local { bins: 32 });
    let policy = fit_policy(&w.paths, &w.z, Some(&w.m_star), &config).unwrap();
    let tau = apply_policy(&policy, &w.paths, &w.z, Some(&w.m_star)).unwrap();
    assert!((mc_price(&w.z, &tau).unwrap().mean - w.value).abs() < 1e-10);
}

#[test]
fn any_perturbation_of_the_doob_martingale_overprices() {
    let tree = TreeModel::symmetric(5, 100.0, 1.01, 0.1);
    let w = exact_world(&tree, &put()).unwrap();
    let q = w.z.len();
    let dates = tree.steps + 1;
    for scale in [0.0, 0.5, 0.9, 1.1, 2.0] {
        let m = MartingaleMatrix::from_rows(
            q,
            dates,
            (0..q).flat_map(|p| w.m_star.row(p).iter().map(move |v| scale * v)).collect(),
        )
        .unwrap();
        let dual = dual_price(&w.z, &m).unwrap().mean;
        assert!(dual >= w.value - 1e-12, "scale {scale}");
        assert!(proxy_identity_error(&w.z, &m) < 1e-10);
    }
}

#[test]
fn suite_reports_every_check() {
    let checks = run_oracle_suite().unwrap();
    assert!(checks.iter().all(|c| c.passed), "{:?}", checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    assert!(checks.iter().any(|c| c.name.contains("corrupted_martingale_overprices")));
    assert!(checks.iter().any(|c| c.name.starts_with("zero_payoff")));
}
