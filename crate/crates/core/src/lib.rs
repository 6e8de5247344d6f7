//! Tree-discretized mean-field equilibrium prices for a market of informed and
//! standard agents, with the diagnostics used to check them.

pub mod condexp;
pub mod equilibrium;
pub mod error;
pub mod fbsde;
pub mod io;
pub mod market;
pub mod model;
pub mod noise_tree;
pub mod paths;

pub use error::{Error, Result};
