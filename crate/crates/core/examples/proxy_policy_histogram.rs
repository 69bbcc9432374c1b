//! Where the proxy policy from the fitted martingale disagrees with LS1.

use bermudan_dual::harness::{run_histogram, ExperimentConfig};

fn main() -> bermudan_dual::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/table1_row2.toml");
    let mut config = ExperimentConfig::load(path)?;
    config.algorithm.q1 = 50_000;
    config.algorithm.q2 = 20_000;
    config.algorithm.q3 = 20_000;
    let h = run_histogram(&config, None)?;
    println!("proxy mean {:.4}, dual {:.4}", h.proxy_mean, h.dual.mean);
    println!("P(tau_proxy - tau_ls1 = 0) = {:.3}", h.histogram.count(0) as f64 / h.histogram.total() as f64);
    print!("{}", h.histogram.to_csv());
    Ok(())
}
