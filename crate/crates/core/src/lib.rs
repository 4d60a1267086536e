//! Verifiable process reward modeling for risk-of-bias assessment.
//!
//! The crate covers the step schema, trace parsing, decision tables, reward
//! composition, group-relative policy objectives, a Monte Carlo check of the
//! advantage separation result, evaluation metrics and a small tabular policy
//! simulator.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod group;
pub mod metrics;
pub mod reward;
pub mod rules;
pub mod schema;
pub mod sim;
pub mod theorem;
pub mod trace;

pub use error::{Error, Result};
