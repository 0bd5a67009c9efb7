//! Self-styled inpainting at desk scale: a procedural texture corpus, a
//! progressively trained patch style encoder, a pixel-space diffusion model
//! with parallel semantic/style cross-attention and a zero-initialized
//! reference network, plus the evaluation protocols used to check them.

pub mod dataset;
mod error;
pub mod image;
pub mod rng;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod diffusion;
pub mod reference;
pub mod psrl;
pub mod eval;
