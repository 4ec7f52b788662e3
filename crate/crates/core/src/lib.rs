//! Bilevel fast-weight fine-tuning on a small from-scratch transformer.
//!
//! The crate bundles a reverse-mode autodiff engine, a toy decoder
//! transformer, the bidirectional-context attention mask, low-rank fast
//! weights with an inner/outer training loop, attention-dilution
//! diagnostics, and a synthetic long-context task generator.

pub mod autodiff;
pub mod bilevel;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fastweights;
mod gemm;
pub mod masking;
pub mod model;
pub mod optim;
pub mod rope;
pub mod svg;
pub mod taskgen;
pub mod tensor;
pub mod timing;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
