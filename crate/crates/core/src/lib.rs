//! Monte-Carlo pricing of Bermudan options with an approximate Doob martingale.
//!
//! The martingale is fitted by a backward least-squares recursion over
//! elementary hedging increments on a sub-tick grid. It is then used three ways:
//!
//! * as a control variate for Longstaff–Schwartz primal prices,
//! * to compute a dual (upper-bound) price,
//! * to build a proxy exercise policy through the pathwise-maximum recursion.
//!
//! Small recombining binomial trees provide exact ground truth for all of
//! the above (see [`oracle`]).

pub mod dual_martingale;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod market;
pub mod oracle;
pub mod regression;
pub mod stopping;

pub use error::{Error, Result};
