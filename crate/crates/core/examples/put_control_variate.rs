//! Bermudan put: LS1 and LS2 with and without the martingale control variate.
//!
//! Pass a sample size to trade speed for accuracy, e.g.
//! `cargo run --release --example put_control_variate -- 100000`.

use bermudan_dual::harness::{rows_to_table, run_experiment, ExperimentConfig};

const CONFIG: &str = r#"
id = "put"

[model]
spot = [100.0]
rate = 0.06
volatility = [0.4]
maturity = 0.5
exercise_dates = 10

[payoff]
kind = "put"
strike = 100.0

[algorithm]
q1 = 20000
q2 = 20000
q3 = 20000
nbar = 5
p_local = 50
ls_degree = 6
variants = ["ls2", "ls1"]
runs = 4
itm_only = true
"#;

fn main() -> bermudan_dual::Result<()> {
    let mut config = ExperimentConfig::from_toml(CONFIG)?;
    if let Some(q) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        config.algorithm.q1 = q;
        config.algorithm.q2 = q;
        config.algorithm.q3 = q;
    }
    let result = run_experiment(&config, None)?;
    print!("{}", rows_to_table(&result.rows));
    Ok(())
}
