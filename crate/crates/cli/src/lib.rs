//! Command-line pipeline: configuration, stage runners and plot writers.

pub mod config;
pub mod error;
pub mod stages;
pub mod svg;
