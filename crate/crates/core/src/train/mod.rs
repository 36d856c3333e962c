//! Domain-adaptation training loop, evaluation, checkpoints and the loss ablation.

mod ablation;
mod checkpoint;
mod config;
mod data;
mod gradcheck;
mod metrics;
mod trainer;

pub use ablation::*;
pub use checkpoint::*;
pub use config::*;
pub use data::*;
pub use gradcheck::*;
pub use metrics::*;
pub use trainer::*;
