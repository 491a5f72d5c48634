//! Structured fine-pruning of small decoder-only transformers.
//!
//! The crate trains a toy GPT-style model while gradually removing MLP
//! neurons by one of five criteria (magnitude, gradual random, hard
//! movement, soft movement and GUM, a uniqueness-regularized movement
//! variant with global selection), optionally under knowledge
//! distillation, and measures how redundant the surviving neurons are.

pub mod analysis;
pub mod autodiff;
pub mod distill;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod pruning;
pub mod schedule;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
