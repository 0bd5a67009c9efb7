//! Progressive self-style representation learning: a patch encoder trained
//! first on second-order feature statistics, then jointly with a projector
//! under a style-contrastive objective.

mod embed;
mod loss;
mod model;
mod train;

pub use embed::embed_style;
pub use loss::*;
pub use model::*;
pub use train::*;
