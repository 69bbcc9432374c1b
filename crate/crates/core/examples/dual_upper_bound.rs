//! Dual upper bound for the put as the sub-tick count grows.

use bermudan_dual::dual_martingale::{evaluate_martingale, fit_dual_coefficients, IncrementBasis, SubtickLayout};
use bermudan_dual::estimators::dual_price;
use bermudan_dual::market::{discounted_payoffs, simulate_paths, ModelSpec, PayoffSpec};

fn main() -> bermudan_dual::Result<()> {
    let payoff = PayoffSpec::Put { strike: 100.0 };
    println!("nbar  layout       dual     stderr");
    for nbar in [1, 2, 5, 10] {
        let model = ModelSpec::single(100.0, 0.06, 0.4, 0.5, 10, nbar);
        let fit = simulate_paths(&model, 50_000, 1)?;
        let eval = simulate_paths(&model, 50_000, 3)?;
        let z_fit = discounted_payoffs(&fit, &payoff)?;
        let z = discounted_payoffs(&eval, &payoff)?;
        for layout in [SubtickLayout::Shared, SubtickLayout::PerSubtick] {
            let basis = IncrementBasis::from_paths(&fit, 50, layout)?;
            let dm = fit_dual_coefficients(&fit, &z_fit, basis)?;
            let m = evaluate_martingale(&dm, &eval)?;
            let est = dual_price(&z, &m)?;
            println!("{nbar:>4}  {:<11} {:.4}  {:.4}", format!("{layout:?}"), est.mean, est.stderr.unwrap_or(0.0));
        }
    }
    Ok(())
}
