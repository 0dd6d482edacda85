//! Training, evaluation, rendering and displacement statistics for the
//! `occflow` estimator.

pub mod cdf;
pub mod config;
pub mod evaluate;
pub mod train;
pub mod viz;

pub use config::{Optimizer, RunConfig, Strategy, TransformFamily};
