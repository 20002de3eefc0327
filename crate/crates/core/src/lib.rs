//! Chance-constrained economic dispatch with energy storage opportunity pricing.

pub mod baseline;
pub mod cli;
pub mod costs;
pub mod dispatch;
pub mod distributions;
pub mod error;
pub mod reformulation;
pub mod scenarios;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
