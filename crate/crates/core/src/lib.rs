//! Cross-impact models for multi-asset price dynamics: model catalogue,
//! axiom checks, covariance estimation, synthetic markets and
//! goodness-of-fit scoring.

pub mod axioms;
pub mod cli;
pub mod error;
pub mod estimation;
pub mod gof;
pub mod matops;
pub mod models;
pub mod sampling;
mod serde_rows;
pub mod simulate;

pub use error::{Error, Result};
