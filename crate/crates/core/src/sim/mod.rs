//! Street-canyon channel simulator.

pub mod channel;
pub mod dataset;
pub mod scenario;
pub mod scene;
pub mod trace;

pub use channel::{add_noise, steering_vector, synth_cfr, CfrMatrix};
pub use dataset::{generate_dataset, Dataset, DatasetManifest, DroppedLink, TensorSpec};
pub use scenario::{ArrayGeometry, Lane, Scenario, UeGrid, VehicleClass, SPEED_OF_LIGHT};
pub use scene::Scene;
pub use trace::{trace_paths, Mpc, MpcSet, SemanticLabel};
