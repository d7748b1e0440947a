//! Synthetic data, reference solutions and rate experiments for `ispppa`.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;
pub mod reference;
