//! Training laboratory for a small multimodal transformer.
//!
//! The crate bundles a reverse-mode autodiff core, a toy vision-language
//! model with optional per-modality transformer weights, an auxiliary
//! per-patch regression objective, input-token blanking, a procedural grid
//! scene generator with question/answer oracles, a staged trainer, and
//! probing tools that read visual tokens through the language head.

pub mod autodiff;
pub mod blank;
pub mod cli;
pub mod error;
pub mod model;
pub mod objectives;
pub mod par;
pub mod probe;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
