//! The explorable model: spatial and parameter feature structures, fusion,
//! and the MLP decoder.

pub mod arch;
pub mod checkpoint;
pub mod domain;
pub mod grid;
pub mod model;
pub mod tape;

pub use arch::{Activation, ArchConfig, Fusion, SpatialVariant};
pub use domain::{Bounds, DomainSpec, ParamAxis};
pub use grid::{FeatureGrid, Structure};
pub use model::{DenseDecoder, ExplorableModel, FeatureStore, Linear, MlpDecoder};
