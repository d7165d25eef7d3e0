use std::path::PathBuf;

/// Every failure the library can report. Variant names are stable and are
/// what the CLI prints when a subcommand fails.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),

    #[error("invalid token: {0}")]
    InvalidToken(String),

    #[error("line {line_no}: {reason}")]
    ParseError { line_no: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("the train split is empty")]
    EmptyTrainSplit,

    #[error("stay {0} has no registries")]
    EmptyStay(String),

    #[error("{statics} static tokens plus [CLS] do not fit in {max_len} positions")]
    StaticsOverflow { statics: usize, max_len: usize },

    #[error("text not in embedding cache: {0:?}")]
    CacheMiss(String),

    #[error("non-finite value {0}")]
    NonFiniteValue(f64),

    #[error("index {index} out of range for table of {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("sequence has no tokens eligible for masking")]
    NoEligibleTokens,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("head mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("gradient mismatch in {param}: relative error {rel_err:e}")]
    GradMismatch { param: String, rel_err: f64 },

    #[error("malformed file: {0}")]
    FormatError(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("batch has no masked slots")]
    NoMaskedSlots,

    #[error("unknown task: {0}")]
    UnknownTask(String),

    #[error("loss diverged at epoch {epoch}: {value}")]
    DivergedLoss { epoch: usize, value: f64 },

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Short variant name, e.g. `ParseError`.
    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidRegistry(_) => "InvalidRegistry",
            Error::InvalidToken(_) => "InvalidToken",
            Error::ParseError { .. } => "ParseError",
            Error::Io { .. } => "IoError",
            Error::InvalidRatios(_) => "InvalidRatios",
            Error::EmptyTrainSplit => "EmptyTrainSplit",
            Error::EmptyStay(_) => "EmptyStay",
            Error::StaticsOverflow { .. } => "StaticsOverflow",
            Error::CacheMiss(_) => "CacheMiss",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::NoEligibleTokens => "NoEligibleTokens",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::ModeMismatch(_) => "ModeMismatch",
            Error::GradMismatch { .. } => "GradMismatch",
            Error::FormatError(_) => "FormatError",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::NoMaskedSlots => "NoMaskedSlots",
            Error::UnknownTask(_) => "UnknownTask",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::MissingLabels(_) => "MissingLabels",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
