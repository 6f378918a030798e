//! Experiment driver for rate-adaptive vector quantization.
//!
//! Ties the core library to a reproducible workflow: synthetic or IDX
//! datasets, a desk-scale convolutional autoencoder, two-objective
//! training with periodic checkpoints, codebook adaptation to arbitrary
//! target sizes, and rate sweep reports with a manifest that pins every
//! input of the run.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod rng;
pub mod train;
