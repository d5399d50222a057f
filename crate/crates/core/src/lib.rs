//! Camera-aware person re-identification: per-camera retrieval metrics and a
//! reference implementation of a pairwise reverse-attention block with
//! adversarial gradient reversal, built on a small reverse-mode tape.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apra;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod toylab;

pub use error::{Error, Result};
pub use exec::Exec;
