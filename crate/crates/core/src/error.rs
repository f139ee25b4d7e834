use std::path::PathBuf;

/// Every failure the library can report.
///
/// Each variant maps to a short, stable code (see [`Error::code`]) which the
/// CLI prints as the first token of its diagnostic line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-positive output extent ({detail})")]
    Extent { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("model spec: {0}")]
    Spec(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("no ground truth")]
    NoGroundTruth,

    #[error("power trace: {0}")]
    Trace(String),

    #[error("no working period at or above {threshold_w} W")]
    NoWorkingPeriod { threshold_w: f64 },

    #[error("working period too short: {len} samples leaves an empty middle third")]
    PeriodTooShort { len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, greppable identifier for the failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Extent { .. } => "E_EXTENT",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::NonScalarRoot(_) => "E_NONSCALAR_ROOT",
            Error::Spec(_) => "E_SPEC",
            Error::Weights(_) => "E_WEIGHTS",
            Error::InvalidBox(_) => "E_BOX",
            Error::NoGroundTruth => "E_NO_GROUND_TRUTH",
            Error::Trace(_) => "E_TRACE",
            Error::NoWorkingPeriod { .. } => "E_NO_WORKING_PERIOD",
            Error::PeriodTooShort { .. } => "E_PERIOD_TOO_SHORT",
            Error::InvalidArgument(_) => "E_ARG",
            Error::Dataset(_) => "E_DATASET",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
