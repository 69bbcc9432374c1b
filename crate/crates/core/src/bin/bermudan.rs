//! Command-line front end for the experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bermudan_dual::dual_martingale::{load_martingale, save_martingale, DualMartingale, SubtickLayout};
use bermudan_dual::harness::{
    fit_martingale, rows_to_csv, rows_to_table, run_experiment, run_histogram, run_oracle_suite, suite_to_csv,
    ExperimentConfig,
};
use bermudan_dual::stopping::LsVariant;
use bermudan_dual::Result;

#[derive(Parser)]
#[command(name = "bermudan", version, about = "Bermudan option pricing with fitted dual martingales")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its result rows.
    Price {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        output: Output,
        /// Reuse a martingale written by `fit-martingale`.
        #[arg(long)]
        martingale_file: Option<PathBuf>,
    },
    /// Run several experiments into one table.
    Table {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        output: Output,
    },
    /// Differences between proxy and LS1 exercise dates, as CSV.
    Histogram {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        martingale_file: Option<PathBuf>,
    },
    /// Exact checks on enumerated binomial trees.
    Oracle {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Fit the dual martingale and save it.
    FitMartingale {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Output {
    /// Write CSV here instead of a table on stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Print CSV on stdout.
    #[arg(long, conflicts_with = "out")]
    csv: bool,
    /// Fill the `seconds` column with wall time (output is then not reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    q1: Option<usize>,
    #[arg(long)]
    q2: Option<usize>,
    #[arg(long)]
    q3: Option<usize>,
    #[arg(long)]
    nbar: Option<usize>,
    #[arg(long)]
    p_local: Option<usize>,
    #[arg(long)]
    ls_degree: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated list, e.g. `ls2,ls1`.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Option<Vec<LsVariant>>,
    #[arg(long)]
    itm_only: bool,
    #[arg(long)]
    include_ls2prime: bool,
    /// Draw a fresh martingale-fit sample in every run.
    #[arg(long)]
    refresh_q1: bool,
    /// One coefficient per sub-tick instead of one per interval.
    #[arg(long)]
    per_subtick: bool,
    /// Regress on all paths, not only in-the-money ones.
    #[arg(long, conflicts_with = "itm_only")]
    all_paths: bool,
    #[arg(long)]
    seed_q1: Option<u64>,
    #[arg(long)]
    seed_q2: Option<u64>,
    #[arg(long)]
    seed_q3: Option<u64>,
}

fn parse_variant(s: &str) -> std::result::Result<LsVariant, String> {
    match s {
        "ls1" => Ok(LsVariant::Ls1),
        "ls2" => Ok(LsVariant::Ls2),
        "ls2prime" => Ok(LsVariant::Ls2Prime),
        _ => Err(format!("unknown variant `{s}` (ls1, ls2, ls2prime)")),
    }
}

impl Overrides {
    fn load(&self, path: &Path) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(path)?;
        let a = &mut c.algorithm;
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { a.$field = v; })*};
        }
        set!(q1, q2, q3, nbar, p_local, ls_degree, runs);
        if let Some(v) = &self.variants {
            a.variants = v.clone();
        }
        a.itm_only = (a.itm_only || self.itm_only) && !self.all_paths;
        if self.per_subtick {
            a.subtick_layout = SubtickLayout::PerSubtick;
        }
        a.include_ls2prime |= self.include_ls2prime;
        a.refresh_q1 |= self.refresh_q1;
        if let Some(s) = self.seed_q1 {
            c.seeds.q1 = s;
        }
        if let Some(s) = self.seed_q2 {
            c.seeds.q2 = s;
        }
        if let Some(s) = self.seed_q3 {
            c.seeds.q3 = s;
        }
        c.validate()?;
        Ok(c)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_dm(path: Option<&Path>) -> Result<Option<DualMartingale>> {
    path.map(load_martingale).transpose()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Price {
            config,
            overrides,
            output,
            martingale_file,
        } => {
            let c = overrides.load(&config)?;
            let dm = load_dm(martingale_file.as_deref())?;
            let res = run_experiment(&c, dm.as_ref())?;
            write_rows(&res.rows, &output)?;
        }
        Command::Table {
            configs,
            overrides,
            output,
        } => {
            let mut rows = Vec::new();
            for path in &configs {
                let c = overrides.load(path)?;
                eprintln!("running {}", c.id);
                rows.extend(run_experiment(&c, None)?.rows);
            }
            write_rows(&rows, &output)?;
        }
        Command::Histogram {
            config,
            overrides,
            out,
            martingale_file,
        } => {
            let c = overrides.load(&config)?;
            let dm = load_dm(martingale_file.as_deref())?;
            let res = run_histogram(&c, dm.as_ref())?;
            emit(&res.histogram.to_csv(), out.as_deref())?;
            eprintln!(
                "mode {}  P(diff = 0) = {:.4}",
                res.histogram.mode(),
                res.histogram.count(0) as f64 / res.histogram.total() as f64
            );
        }
        Command::Oracle { out } => {
            let checks = run_oracle_suite()?;
            emit(&suite_to_csv(&checks), out.as_deref())?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            eprintln!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
        Command::FitMartingale { config, overrides, out } => {
            let c = overrides.load(&config)?;
            let dm = fit_martingale(&c, 0)?;
            save_martingale(&dm, &out)?;
            eprintln!("wrote {} coefficients to {}", dm.basis().len() * c.model.exercise_dates, out.display());
        }
    }
    Ok(true)
}

fn write_rows(rows: &[bermudan_dual::harness::ResultRow], output: &Output) -> Result<()> {
    if output.csv || output.out.is_some() {
        emit(&rows_to_csv(rows, output.timing), output.out.as_deref())
    } else {
        emit(&rows_to_table(rows), None)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
