//! Neural activation coding for small ReLU encoders.
//!
//! Encoders are trained so that the sign pattern of their last
//! preactivation (the activation code) survives a binary symmetric channel,
//! which drives data points into many distinct linear regions. The crate
//! contains the differentiable objectives, exact small-instance
//! mutual-information oracles, Hamming retrieval, linear-region analysis
//! and the `nac` command line tool.

pub mod format;
pub mod tensor;
pub mod rng;
pub mod model;
pub mod codes;
pub mod channel;
pub mod objective;
pub mod analysis;
pub mod cli;
pub mod data;
pub mod config;
pub mod training;
pub mod evaluation;
pub mod regions;
