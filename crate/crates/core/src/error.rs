use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("policy variant {0} requires a martingale")]
    MissingMartingale(&'static str),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("martingale file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("need at least {needed} runs, got {got}")]
    InsufficientRuns { needed: usize, got: usize },

    #[error("tree with {0} steps is too large to enumerate (max 20)")]
    TreeTooLarge(usize),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("weak duality violated: dual {dual:.6} < primal {primal:.6} - 3 x {stderr:.6}")]
    WeakDuality { dual: f64, primal: f64, stderr: f64 },

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
