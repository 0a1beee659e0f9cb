use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("audio too short: {samples} samples, need at least {frame_len} for one frame")]
    AudioTooShort { samples: usize, frame_len: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("participant `{0}` appears in more than one split")]
    SplitViolation(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("need {needed} participants with at least two clips, have {available}")]
    InsufficientParticipants { needed: usize, available: usize },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("empty list")]
    EmptyList,

    #[error("scores contain a single class; ROC-AUC undefined")]
    DegenerateLabels,

    #[error("benchmark needs at least one timed trial")]
    EmptyBenchmark,

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, single-token name used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::AudioTooShort { .. } => "AudioTooShort",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Parse { .. } => "ParseError",
            Error::SplitViolation(_) => "SplitViolation",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::NonScalarLoss(_) => "NonScalarLoss",
            Error::MissingGradient(_) => "MissingGradient",
            Error::ZeroNorm => "ZeroNorm",
            Error::NonPositiveTemperature(_) => "NonPositiveTemperature",
            Error::InsufficientParticipants { .. } => "InsufficientParticipants",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::EmptySplit(_) => "EmptySplit",
            Error::EmptyList => "EmptyList",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::EmptyBenchmark => "EmptyBenchmark",
            Error::WeightFormat(_) => "WeightFormat",
            Error::Wav { .. } => "WavError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
