//! Rumor detection on propagation trees with a population-dynamics encoder.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod encoder;
pub mod eval;
pub mod format;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod stance;
pub mod synthetic;
pub mod training;
pub mod tree;
