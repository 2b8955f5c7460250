//! Library surface of the experiment harness; the `clkd` binary is a thin
//! shell over these modules, and the acceptance suite drives them directly.

pub mod config;
pub mod failure;
pub mod report;
pub mod runner;

pub use failure::{CliResult, Failure};
