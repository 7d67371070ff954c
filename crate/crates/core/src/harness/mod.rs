//! Experiment drivers: data generators, staged training, sweeps and
//! report writers.

pub mod config;
pub mod report;
pub mod stages;
pub mod sweep;
pub mod synthetic;
pub mod toyqa;
pub mod training;
