//! Synthetic ensembles, manifests and volume files.

pub mod dataset;
pub mod family;
pub mod oracle;
pub mod quadrature;
pub mod volume;

pub use dataset::{Batch, EnsembleDataset, EnsembleManifest, MemberEntry, Sampler, Split};
pub use family::{AnalyticFamily, Blob, ParamExpr, SineTerm};
pub use oracle::{oracle_correlation, oracle_covariance, oracle_fields, oracle_stats, OracleFields, OracleStats, ParamRule};
pub use volume::{load_volume, save_volume, VolumeGrid, VolumeHeader};
