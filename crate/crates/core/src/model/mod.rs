//! The toy multimodal transformer: vision encoder G, connector M, backbone F
//! with optional per-modality weights, tied language-model head, visual head,
//! and the frozen auxiliary encoder A.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, Pathways};
pub use forward::{patchify, Features};
pub use params::{Block, Bound, Group, Layout, Lin, ModelParams, Norm, Param};
