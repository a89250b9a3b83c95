//! Configuration, suites and output for the `mfcrand` command.

pub mod config;
pub mod error;
pub mod instances;
pub mod report;
pub mod run;
pub mod suites;

pub use config::ExperimentConfig;
pub use error::CliError;
