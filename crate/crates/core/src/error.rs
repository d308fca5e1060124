use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the engine.
///
/// Variant names follow the failure classes that callers match on: CLI exit
/// codes, HTTP status mapping and the pipeline's stage-failure reporting all
/// dispatch on them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("frame sequence has a gap: index {missing} is missing")]
    Gap { missing: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no frames found in {0}")]
    Empty(PathBuf),

    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("decoder exited with code {code:?}: {stderr}")]
    Decoder { code: Option<i32>, stderr: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt RLE: counts sum to {sum}, expected {expected}")]
    CorruptRle { sum: u64, expected: u64 },

    #[error("non-finite color transform parameter at cell {cell}")]
    Param { cell: usize },

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("frame {frame}: mask covers the entire frame, nothing to inpaint from")]
    Uninpaintable { frame: usize },

    #[error("degenerate pose in frame {frame}: anchor segment has zero length")]
    DegeneratePose { frame: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("worker timed out after {0} s")]
    Timeout(u64),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("stage {stage} failed ({code}): {message}")]
    Stage {
        stage: String,
        code: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(what: impl Into<String>) -> Self {
        Error::Dimension(what.into())
    }

    /// Wrap an error raised while executing `stage` so the stage is named.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                code: other.code().to_string(),
                message: other.to_string(),
            },
        }
    }

    /// Stable machine-readable code, used on the wire and in HTTP bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Gap { .. } => "gap",
            Error::Dimension(_) => "dimension",
            Error::Empty(_) => "empty",
            Error::Length { .. } => "length",
            Error::Decoder { .. } => "decoder",
            Error::Config(_) => "config",
            Error::CorruptRle { .. } => "corrupt_rle",
            Error::Param { .. } => "param",
            Error::Prompt(_) => "prompt",
            Error::Uninpaintable { .. } => "uninpaintable",
            Error::DegeneratePose { .. } => "degenerate_pose",
            Error::Protocol(_) => "protocol",
            Error::Timeout(_) => "timeout",
            Error::ContractViolation(_) => "contract_violation",
            Error::Stage { .. } => "stage",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
