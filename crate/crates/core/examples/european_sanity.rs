//! Monte-Carlo European put against the closed form.

use bermudan_dual::estimators::mc_price;
use bermudan_dual::market::{discounted_payoffs, european_put_closed_form, simulate_paths, ModelSpec, PayoffSpec};
use bermudan_dual::stopping::StopTimes;

fn main() -> bermudan_dual::Result<()> {
    let model = ModelSpec::single(100.0, 0.06, 0.4, 0.5, 10, 1);
    let paths = simulate_paths(&model, 200_000, 42)?;
    let z = discounted_payoffs(&paths, &PayoffSpec::Put { strike: 100.0 })?;
    let est = mc_price(&z, &StopTimes::constant(paths.len(), 10))?;
    let exact = european_put_closed_form(100.0, 100.0, 0.06, 0.4, 0.5);
    println!("monte carlo  {:.4} +- {:.4}", est.mean, est.stderr.unwrap_or(0.0));
    println!("closed form  {exact:.4}");
    Ok(())
}
