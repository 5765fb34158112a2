use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest error (frame {frame:?}): {message}")]
    Manifest {
        frame: Option<usize>,
        message: String,
    },

    #[error("dimension mismatch (frame {frame}): {message}")]
    Dimension { frame: usize, message: String },

    #[error("invalid PFM file {path}: {message}")]
    Pfm { path: PathBuf, message: String },

    #[error("unsupported depth file extension: {0}")]
    DepthFormat(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("no valid pixels for {0}")]
    EmptySelection(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },
}

impl Error {
    /// Stable snake_case identifier of the variant, for machine-readable
    /// reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Image { .. } => "image",
            Self::Json { .. } => "json",
            Self::Manifest { .. } => "manifest",
            Self::Dimension { .. } => "dimension",
            Self::Pfm { .. } => "pfm",
            Self::DepthFormat(_) => "depth_format",
            Self::Shape(_) => "shape",
            Self::Checkpoint(_) => "checkpoint",
            Self::CheckpointVersion { .. } => "checkpoint_version",
            Self::EmptySelection(_) => "empty_selection",
            Self::LengthMismatch { .. } => "length_mismatch",
            Self::Config(_) => "config",
            Self::Diverged { .. } => "diverged",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
