//! Distances between Gaussian-mixture hidden Markov models.

pub mod cli;
pub mod distance;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gaussian;
pub mod hmm;
pub mod mixture;
pub mod ot;
pub mod seed;

pub use error::{Error, Result};
