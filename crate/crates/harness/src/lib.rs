//! Configuration, orchestration, serialization, and the invariant suite
//! behind the `clv` command-line tool.

pub mod config;
pub mod experiment;
pub mod io;
pub mod seeds;
pub mod validate;

pub use config::{ExperimentConfig, SourceKind};
pub use experiment::{run_experiment, HarnessError, Pipeline, RunSummary};
