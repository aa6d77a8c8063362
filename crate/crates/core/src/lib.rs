//! Training-free object insertion on a toy multimodal diffusion transformer.
//!
//! The pipeline runs a source and a target generation side by side. Target
//! attention is extended with the source keys and values under a balance
//! weight, the source structure is injected at an early step, and the
//! subject's attention map drives a latent blend that keeps everything
//! outside the inserted object identical to the source.

pub mod blending;
pub mod error;
pub mod eval;
pub mod extended;
pub mod flow;
pub mod io;
pub mod model;
pub mod pipeline;

#[doc(hidden)]
pub mod testing;

pub use error::{Error, Result};
