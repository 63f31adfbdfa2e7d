use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the face-hop pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing image files: {}", format_paths(.0))]
    MissingImages(Vec<PathBuf>),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("unsupported container version {found} (this build reads up to {supported})")]
    Version { found: u16, supported: u16 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("image decode: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
