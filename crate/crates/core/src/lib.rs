//! Diagnostics for no arbitrage of the first kind in continuous-path market
//! models: risk-premium and mass checks, deflator construction, explicit
//! arbitrage families and exact oracles on finite trees.

pub mod cli;
pub mod config;
pub mod deflator;
pub mod error;
pub mod forge;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod report;
pub mod structure;
pub mod tree;

pub use error::{Error, Result};
