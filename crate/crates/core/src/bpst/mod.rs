//! Body-part attention spatio-temporal encoder and temporal decoder.

mod config;
mod encoder;
mod mask;

pub use config::BpstConfig;
pub use encoder::{body_part_attention, init_body_part_layer, token_class, Bpst, SpatialFeatures, TOKEN_CLASSES};
pub use mask::{build_adjacency_mask, AdjacencyMask};
