//! Error type shared by every surfmap module.

use thiserror::Error;

/// Unified error for the surfmap crates.
///
/// The CLI maps variants onto exit codes: configuration problems exit 2,
/// data/IO problems exit 3 and numeric failures exit 4.
#[derive(Debug, Error)]
pub enum SurfmapError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty mask: loss requires at least one foreground pixel")]
    EmptyMask,

    #[error("empty projection: object does not cover any pixel")]
    EmptyProjection,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, SurfmapError>;

impl SurfmapError {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            SurfmapError::Config(_) | SurfmapError::Json(_) => 2,
            SurfmapError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
