//! Semantic localization workbench: channel simulation, CSI fingerprints,
//! multi-task domain-adaptation models, losses and training.

pub mod binio;
pub mod error;
pub mod features;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod train;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
