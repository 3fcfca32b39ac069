//! Stochastic shape dynamics on landmark configurations.

pub mod error;
pub mod kernels;
pub mod landmarks;
pub mod noise;
pub mod processes;
pub mod bridges;
pub mod phylo;
pub mod io;
pub mod rng;

pub use error::{Error, Result};
