//! Pixel-space diffusion with a small U-Net whose blocks carry parallel
//! semantic and style cross-attention, plus the reference network that
//! injects spatial context through zero-initialized connectors.

mod arch;
mod model;
mod net;
mod sample;
mod schedule;
mod train;

pub use arch::*;
pub use model::*;
pub use net::*;
pub use sample::*;
pub use schedule::*;
pub use train::*;
