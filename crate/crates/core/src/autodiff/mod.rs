//! Reverse-mode automatic differentiation, optimizer, gradient checking and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{conv1d_out_len, AttnMask, AttnSpec, Gradients, Graph, PadMode, Var};
pub use params::ParamStore;
