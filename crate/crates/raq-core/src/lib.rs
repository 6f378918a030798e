//! Core library for rate-adaptive vector quantization.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tape`]), a vector-quantization layer with EMA or gradient codebook
//! updates ([`vq`]), a sequence-to-sequence codebook adapter ([`seq2seq`]),
//! training-free clustering-based adaptation ([`cluster`]), and image
//! quality metrics ([`metrics`]).

pub mod cluster;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod seq2seq;
pub mod tape;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod training;
pub mod vq;
pub(crate) mod wire;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{shared, SharedTensor, Tensor};
