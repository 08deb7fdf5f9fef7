//! Config loading, stage sequencing and the command-line front end.

pub mod cli;
pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{cmd_build_ipb, cmd_eval, cmd_partition, cmd_run, cmd_sweep, cmd_synth, SweepPoint, SweepResult};
pub use config::{ProviderMode, RunConfig, SweepGrid};
pub use pipeline::{execute_run, LoadedBenchmark, RunDetails, RunOutcome};
