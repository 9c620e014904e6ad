//! Experiment driver for distributed PCA: data generation, single runs,
//! resumable sweeps, reports and verification suites.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gen;
pub mod report;
pub mod run;
pub mod verify;

pub use error::{CliError, CliResult};
