//! Command-line workflow around the inference engine: ingestion, model
//! presets, fitting, model comparison, synthetic-region simulation, and the
//! brute-force oracle runner.

pub mod commands;
pub mod ingest;
pub mod output;
pub mod presets;
pub mod simulate;

pub use commands::{compare_command, fit_command, oracle_command, simulate_command, ModelSource, RunConfig};

use inla_core::Error;

/// Process exit code for an error: 2 input validation, 3 numerical failure,
/// 4 configuration.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) | Error::Graph(_) | Error::Io(_) | Error::Spec(_) => 2,
        Error::Config(_) | Error::McmcConfig(_) => 4,
        _ => 3,
    }
}
