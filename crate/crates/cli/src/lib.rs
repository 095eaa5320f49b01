//! Pipeline driver for the `tade` binary: data generation, expert training,
//! test-time weight adaptation, evaluation and report assembly.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 divergence, 4 contract violation
//! (for example weights off the simplex), 5 empty or invalid input.

pub mod args;
pub mod commands;
pub mod config;
mod error;
pub mod pipeline;
pub mod report;

pub use config::{RunConfig, Stage};
pub use error::{CliError, CliResult, EXIT_CONTRACT, EXIT_DIVERGED, EXIT_INVALID, EXIT_IO, EXIT_OK};
