pub mod baselines;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod par;
pub mod pareto;
pub mod quadrature;
pub mod train;
pub mod umnn;

pub use error::{Error, Result};
