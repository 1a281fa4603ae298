//! Command-line harness: data generation, adaptation and benchmark sweeps.

pub mod adapt;
pub mod bench;
mod error;
pub mod io;

pub use error::{CliError, Result};
