//! Errors surfaced to command-line and HTTP clients.

use serde::Serialize;
use thiserror::Error;

/// A failure with its machine-readable tag, the offending axis or field
/// when known, and an HTTP status.
#[derive(Clone, Debug, Error, Serialize)]
#[error("{error}: {detail}")]
pub struct ApiError {
    pub error: String,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn new(status: u16, error: &str, detail: String) -> Self {
        Self { error: error.into(), detail, axis: None, status }
    }

    pub fn bad_request(detail: String, axis: Option<&str>) -> Self {
        Self { axis: axis.map(str::to_string), ..Self::new(400, "request", detail) }
    }

    pub fn not_loaded() -> Self {
        Self::new(409, "model_not_loaded", "no model is loaded".into())
    }

    pub fn not_found(detail: String) -> Self {
        Self::new(404, "not_found", detail)
    }

    pub fn usage(detail: String) -> Self {
        Self::new(2, "usage", detail)
    }
}

impl From<xinr::Error> for ApiError {
    fn from(e: xinr::Error) -> Self {
        use xinr::Error as E;
        let status = match &e {
            E::Domain { .. }
            | E::Config(_)
            | E::Shape(_)
            | E::Region(_)
            | E::DegenerateRange { .. }
            | E::UndefinedCorrelation
            | E::Distribution(_) => 400,
            _ => 500,
        };
        let axis = match &e {
            E::Domain { axis, .. } => Some(axis.clone()),
            _ => None,
        };
        Self { error: e.kind().into(), detail: e.to_string(), axis, status }
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        Self::bad_request(e.to_string(), None)
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        Self::new(500, "io", e.to_string())
    }
}
