//! Stage-2 generator: word-level cross-attention from codes to text, then
//! sentence-conditioned causal self-attention and a next-code head.

mod config;
mod model;
mod record;
mod sample;

pub use config::{GlaConfig, Sampling};
pub use model::{Generation, Gla, GlaForward, TextSource};
pub use record::{dump_attention, AttentionRecord};
pub use sample::sample_from_logits;
