//! Style-consistency and background-fidelity metrics, clustering statistics
//! for patch embeddings, projection export and the benchmark sweep.

mod benchmark;
mod cluster;
mod metrics;
mod projection;

pub use benchmark::*;
pub use cluster::*;
pub use metrics::*;
pub use projection::*;
