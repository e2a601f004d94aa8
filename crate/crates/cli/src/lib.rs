//! Command-line front end: configuration, one function per subcommand, and
//! the error type that maps failures to exit codes.

// Negated comparisons keep NaN out of validated fields.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Profile, RunConfig};
pub use error::CliError;
