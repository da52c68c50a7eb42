use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {value} on axis `{axis}` is outside the normalized range [-1, 1]")]
    Domain { axis: String, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid region: {0}")]
    Region(String),

    #[error("degenerate range [{lo}, {hi}]: width below 1e-12, query it as a point")]
    DegenerateRange { lo: f64, hi: f64 },

    #[error("loss slot {slot} is not a scalar (shape {rows}x{cols})")]
    NonScalarLoss { slot: usize, rows: usize, cols: usize },

    #[error("non-finite gradient first produced at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },

    #[error("correlation undefined: standard deviation is zero")]
    UndefinedCorrelation,

    #[error("noise symbols come from different registries")]
    RegistryMismatch,

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch} (lr_features={lr_features}, lr_decoder={lr_decoder})")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        lr_features: f64,
        lr_decoder: f64,
    },

    #[error("search aborted at restart {restart}, iteration {iteration}: non-finite loss after {retries} retries (lr={lr})")]
    SearchDiverged {
        restart: usize,
        iteration: usize,
        retries: usize,
        lr: f64,
    },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Volume(#[from] VolumeError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"XINR\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume payload truncated: expected {expected} floats, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("volume dims {found:?} do not match expected {expected:?}")]
    DimMismatch { expected: [usize; 3], found: [usize; 3] },

    #[error("unsupported volume header: {0}")]
    Header(String),
}

impl Error {
    /// Short machine-readable tag, used by the CLI and the HTTP service.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Region(_) => "region",
            Error::DegenerateRange { .. } => "degenerate_range",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::UndefinedCorrelation => "undefined_correlation",
            Error::RegistryMismatch => "registry_mismatch",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::SearchDiverged { .. } => "search_diverged",
            Error::Distribution(_) => "distribution",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Volume(_) => "volume",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
