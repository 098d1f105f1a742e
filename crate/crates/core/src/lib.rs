//! Two-stage text-to-motion generation at desk scale.
//!
//! Stage 1 learns a discrete motion codebook with a body-part attention
//! spatio-temporal VQ-VAE. Stage 2 generates code sequences from text with
//! word-level cross-attention and sentence-conditioned causal self-attention.

pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod bpst;
pub mod motion;
pub mod nn;
pub mod gla;
pub mod text;
pub mod vq;
pub mod harness;
