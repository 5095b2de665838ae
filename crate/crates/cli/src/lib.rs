//! Drivers around the inversion library: configuration, field storage,
//! experiment presets and plot-data export.

pub mod config;
pub mod error;
pub mod experiments;
pub mod export;
pub mod fieldstore;
pub mod inversion;

pub use config::InversionConfig;
pub use error::{CliError, CliResult};
pub use inversion::{build_problem, run_inversion, run_problem, Problem, RunReport};
