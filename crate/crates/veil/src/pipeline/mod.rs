//! Run configuration, PNG interchange, and the command implementations
//! behind the CLI binary.

pub mod config;
pub mod pngio;
pub mod run;
