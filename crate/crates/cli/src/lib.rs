//! Configuration, experiment harness, CSV output and self-validation for
//! the `cba-sim` command-line tool.

pub mod config;
pub mod harness;
pub mod output;
pub mod validate;
