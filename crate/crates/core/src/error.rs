use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid catalog: {0}")]
    Catalog(String),

    #[error("video too short for causal triple: {frames} frames (need at least 3)")]
    TooShort { frames: usize },

    #[error("category {category} out of range (catalog has {count})")]
    CategoryOutOfRange { category: usize, count: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label kind {kind} not supported by architecture {arch}")]
    IncompatibleLabel { kind: &'static str, arch: &'static str },

    #[error("frame {frame} out of range for video with {frames} frames")]
    FrameOutOfRange { frame: usize, frames: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible synthetic layout: {0}")]
    Layout(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("unsupported format version {version} in {path}")]
    Version { path: PathBuf, version: u32 },

    #[error("missing annotation for video {0}")]
    MissingAnnotation(String),

    #[error("unknown category {name:?}; valid names: {valid}")]
    UnknownCategory { name: String, valid: String },

    #[error("{0}")]
    Invalid(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-parsable tag used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Catalog(_) => "catalog",
            Error::TooShort { .. } => "too_short",
            Error::CategoryOutOfRange { .. } => "category_range",
            Error::Dimension(_) => "dimension",
            Error::IncompatibleLabel { .. } => "incompatible_label",
            Error::FrameOutOfRange { .. } => "frame_range",
            Error::Config(_) => "config",
            Error::Layout(_) => "layout",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated_payload",
            Error::Version { .. } => "version",
            Error::MissingAnnotation(_) => "missing_annotation",
            Error::UnknownCategory { .. } => "unknown_category",
            Error::Invalid(_) => "invalid",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
