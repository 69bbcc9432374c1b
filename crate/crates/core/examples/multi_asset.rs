//! Two-asset contracts: basket put, max call and min butterfly.

use bermudan_dual::harness::{rows_to_table, run_experiment, ExperimentConfig};

fn main() -> bermudan_dual::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    let mut rows = Vec::new();
    for name in ["table3_row1", "table4_row1", "table5_row1"] {
        let mut config = ExperimentConfig::load(format!("{dir}/{name}.toml"))?;
        config.algorithm.q1 = 20_000;
        config.algorithm.q2 = 20_000;
        config.algorithm.q3 = 20_000;
        config.algorithm.runs = 2;
        rows.extend(run_experiment(&config, None)?.rows);
    }
    print!("{}", rows_to_table(&rows));
    Ok(())
}
