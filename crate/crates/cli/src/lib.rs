//! Batch front end: config parsing and command execution behind the `mfprice` binary.

pub mod config;
pub mod run;
