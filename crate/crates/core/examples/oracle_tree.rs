//! Exact tree world: value, Doob martingale and estimator identities.

use bermudan_dual::estimators::{cv_price, dual_price};
use bermudan_dual::harness::{exact_world, run_oracle_suite};
use bermudan_dual::market::PayoffSpec;
use bermudan_dual::oracle::TreeModel;

fn main() -> bermudan_dual::Result<()> {
    let tree = TreeModel::symmetric(6, 100.0, 1.01, 0.1);
    let w = exact_world(&tree, &PayoffSpec::Put { strike: 100.0 })?;
    println!("tree value {:.6} over {} paths", w.value, w.z.len());
    println!("dual with M*   {:.6}", dual_price(&w.z, &w.m_star)?.mean);
    let cv = cv_price(&w.z, &w.m_star, &w.tau_star)?;
    println!("cv with M*     {:.6} (lambda {:.6})", cv.mean, cv.lambda.unwrap_or(0.0));

    let checks = run_oracle_suite()?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    println!("{} suite checks, {} failed", checks.len(), failed.len());
    for c in failed {
        println!("  {}: {}", c.name, c.detail);
    }
    Ok(())
}
