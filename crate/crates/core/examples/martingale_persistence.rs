//! Fit once, save, reload and reuse the martingale on fresh paths.

use bermudan_dual::dual_martingale::{evaluate_martingale, load_martingale, save_martingale};
use bermudan_dual::estimators::dual_price;
use bermudan_dual::harness::{fit_martingale, ExperimentConfig};
use bermudan_dual::market::{discounted_payoffs, simulate_paths};

fn main() -> bermudan_dual::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/table1_row2.toml");
    let mut config = ExperimentConfig::load(path)?;
    config.algorithm.q1 = 20_000;
    let dm = fit_martingale(&config, 0)?;

    let file = std::env::temp_dir().join("bermudan_put.mart");
    save_martingale(&dm, &file)?;
    let loaded = load_martingale(&file)?;
    println!("saved {} bytes to {}", std::fs::metadata(&file)?.len(), file.display());

    let paths = simulate_paths(&config.model_spec(), 20_000, 777)?;
    let z = discounted_payoffs(&paths, &config.payoff)?;
    let a = dual_price(&z, &evaluate_martingale(&dm, &paths)?)?;
    let b = dual_price(&z, &evaluate_martingale(&loaded, &paths)?)?;
    println!("dual fitted {:.6}, reloaded {:.6}", a.mean, b.mean);
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    std::fs::remove_file(&file)?;
    Ok(())
}
