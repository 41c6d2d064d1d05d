use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("nrrd header field `{field}`: {message}")]
    Nrrd { field: String, message: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index ({0:.3}, {1:.3}, {2:.3}) is outside the volume")]
    OutOfBounds(f64, f64, f64),

    #[error("annulus: {0}")]
    Annulus(String),

    #[error("contour collapsed: the inside region is empty")]
    ContourCollapsed,

    #[error("region error: {0}")]
    Region(String),

    #[error("empty surface: {0}")]
    EmptySurface(String),

    #[error("mesh format error: {0}")]
    MeshFormat(String),

    /// The operation is not allowed in the current session stage.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn nrrd(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Nrrd {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
