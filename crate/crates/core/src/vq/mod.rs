//! Discrete latent space: nearest-neighbour quantization, EMA codebook
//! updates with dead-code reset, and the Stage-1 objective.

mod codebook;
mod loss;

pub use codebook::{codebook_perplexity, CodeSequence, Codebook, Quantization, VqConfig};
pub use loss::{stage1_loss, straight_through, LossComponents, Stage1Loss, Stage1Weights};
