//! Feature-grid surrogate models for ensemble simulations.

pub mod data;
pub mod error;
pub mod explorer;
pub mod field;
pub mod grad;
pub mod inverter;
pub mod metrics;
pub mod paf;
pub mod range_stats;
pub mod region;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result, VolumeError};
pub use field::{ArchConfig, DomainSpec, ExplorableModel};
