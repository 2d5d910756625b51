//! Command-line harness: run specs, the train/eval/predict pipeline,
//! operation-count probes, robustness and lookback sweeps, and JSONL
//! reporting.

pub mod args;
pub mod bench;
pub mod commands;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod spec;

pub use commands::run;
pub use error::{CliError, CliResult};
pub use report::Report;
pub use spec::RunSpec;
