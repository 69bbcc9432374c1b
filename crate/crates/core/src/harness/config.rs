//! Experiment configuration files.
//!
//! Configs are TOML with four sections. Unknown keys are rejected.
//!
//! ```toml
//! id = "put-row2"
//!
//! [model]
//! spot = [100.0]
//! rate = 0.06
//! dividends = [0.0]      # optional, defaults to zero
//! volatility = [0.4]
//! maturity = 0.5
//! exercise_dates = 10
//!
//! [payoff]
//! kind = "put"           # put | butterfly | basket_put | max_call | min_butterfly
//! strike = 100.0         # butterflies take low_strike / high_strike
//!
//! [algorithm]
//! q1 = 100000            # martingale fit sample
//! q2 = 50000             # policy fit sample
//! q3 = 50000             # out-of-sample evaluation
//! nbar = 5               # sub-ticks per exercise interval
//! p_local = 50           # indicator cells per coordinate
//! ls_degree = 6          # polynomial order of the exercise regression
//! variants = ["ls2", "ls1"]
//! runs = 10
//! itm_only = true        # regress on in-the-money paths only
//! include_ls2prime = false
//! refresh_q1 = false
//! subtick_layout = "shared"  # or "per_subtick"
//!
//! [seeds]
//! q1 = 1
//! q2 = 2
//! q3 = 3
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dual_martingale::SubtickLayout;
use crate::market::{ModelSpec, PayoffSpec};
use crate::stopping::LsVariant;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub spot: Vec<f64>,
    pub rate: f64,
    #[serde(default)]
    pub dividends: Vec<f64>,
    pub volatility: Vec<f64>,
    pub maturity: f64,
    pub exercise_dates: usize,
}

fn default_variants() -> Vec<LsVariant> {
    vec![LsVariant::Ls2, LsVariant::Ls1]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub q1: usize,
    pub q2: usize,
    pub q3: usize,
    pub nbar: usize,
    pub p_local: usize,
    pub ls_degree: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<LsVariant>,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub itm_only: bool,
    #[serde(default)]
    pub include_ls2prime: bool,
    #[serde(default)]
    pub refresh_q1: bool,
    #[serde(default)]
    pub subtick_layout: SubtickLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub q1: u64,
    pub q2: u64,
    pub q3: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { q1: 1, q2: 2, q3: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub model: MarketConfig,
    pub payoff: PayoffSpec,
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Market model on the fine grid given by `nbar`.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            spot: self.model.spot.clone(),
            rate: self.model.rate,
            dividends: self.model.dividends.clone(),
            volatility: self.model.volatility.clone(),
            maturity: self.model.maturity,
            exercise_dates: self.model.exercise_dates,
            subticks: self.algorithm.nbar,
        }
    }

    /// Policy variants to run, in output order.
    pub fn variants(&self) -> Vec<LsVariant> {
        let mut v = self.algorithm.variants.clone();
        if self.algorithm.include_ls2prime && !v.contains(&LsVariant::Ls2Prime) {
            v.push(LsVariant::Ls2Prime);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.algorithm;
        if a.q1 == 0 || a.q2 == 0 || a.q3 == 0 {
            return Err(Error::Config("q1, q2 and q3 must be at least 1".into()));
        }
        if a.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if a.p_local == 0 {
            return Err(Error::Config("p_local must be at least 1".into()));
        }
        if self.variants().is_empty() {
            return Err(Error::Config("at least one policy variant is required".into()));
        }
        self.model_spec().validate()?;
        self.payoff.validate()?;
        self.payoff.check_dim(self.model.spot.len())?;
        self.seed_plan().check_disjoint()?;
        Ok(())
    }

    pub fn seed_plan(&self) -> SeedPlan {
        SeedPlan {
            base: self.seeds,
            runs: self.algorithm.runs,
            refresh_q1: self.algorithm.refresh_q1,
        }
    }
}

/// The three sample sets of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleSet {
    MartingaleFit,
    PolicyFit,
    Evaluation,
}

impl SampleSet {
    fn tag(self) -> u64 {
        match self {
            SampleSet::MartingaleFit => 1,
            SampleSet::PolicyFit => 2,
            SampleSet::Evaluation => 3,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed bookkeeping: every `(set, run)` pair gets its own stream seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub base: SeedConfig,
    pub runs: usize,
    pub refresh_q1: bool,
}

impl SeedPlan {
    pub fn seed(&self, set: SampleSet, run: usize) -> u64 {
        let (base, run) = match set {
            SampleSet::MartingaleFit if !self.refresh_q1 => (self.base.q1, 0),
            SampleSet::MartingaleFit => (self.base.q1, run),
            SampleSet::PolicyFit => (self.base.q2, run),
            SampleSet::Evaluation => (self.base.q3, run),
        };
        splitmix64(splitmix64(base) ^ (set.tag() << 56) ^ run as u64)
    }

    /// Errors if any two sample sets would share a stream.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let q1_runs = if self.refresh_q1 { self.runs } else { 1 };
        let sets = [
            (SampleSet::MartingaleFit, q1_runs),
            (SampleSet::PolicyFit, self.runs),
            (SampleSet::Evaluation, self.runs),
        ];
        for (set, count) in sets {
            for run in 0..count {
                if !seen.insert(self.seed(set, run)) {
                    return Err(Error::Config(format!("seed collision for {set:?} run {run}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
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
q1 = 1000
q2 = 500
q3 = 500
nbar = 2
p_local = 10
ls_degree = 3
runs = 3
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.variants(), vec![LsVariant::Ls2, LsVariant::Ls1]);
        assert_eq!(c.seeds, SeedConfig::default());
        assert_eq!(c.model_spec().subticks, 2);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = SAMPLE.replace("runs = 3", "runs = 3\nfoo = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = SAMPLE.replace("strike = 100.0", "strike = 100.0\ncap = 3.0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("q1 = 1000", "q1 = 0")).is_err());
        assert!(ExperimentConfig::from_toml(&SAMPLE.replace("maturity = 0.5", "maturity = -1.0")).is_err());
        let basket = SAMPLE.replace("kind = \"put\"", "kind = \"basket_put\"");
        assert!(ExperimentConfig::from_toml(&basket).is_ok());
        let two = SAMPLE.replace("spot = [100.0]", "spot = [100.0, 90.0]");
        assert!(ExperimentConfig::from_toml(&two).is_err());
    }

    #[test]
    fn sample_sets_never_share_seeds() {
        for refresh in [false, true] {
            let plan = SeedPlan {
                base: SeedConfig { q1: 7, q2: 7, q3: 7 },
                runs: 40,
                refresh_q1: refresh,
            };
            plan.check_disjoint().unwrap();
            assert_ne!(plan.seed(SampleSet::PolicyFit, 0), plan.seed(SampleSet::Evaluation, 0));
        }
        let shared = SeedPlan {
            base: SeedConfig::default(),
            runs: 4,
            refresh_q1: false,
        };
        assert_eq!(shared.seed(SampleSet::MartingaleFit, 0), shared.seed(SampleSet::MartingaleFit, 3));
    }
}
