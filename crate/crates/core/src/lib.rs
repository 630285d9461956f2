// Index loops mirror the math in numeric kernels and oracles.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod gc2n;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod subspace;

pub use error::{Error, Result};
