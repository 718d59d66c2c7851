use std::path::PathBuf;

use thiserror::Error;

use crate::store::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupted file: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid manifest: {0}")]
    InvalidManifest(ValidationReport),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("degenerate query `{query_id}`: projected vector has zero norm")]
    DegenerateQuery { query_id: String },

    #[error("degenerate image embedding: projected vector has zero norm")]
    DegenerateImage,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: &'static str },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing ground truth for query `{0}`")]
    MissingTruth(String),

    #[error("missing candidate subset for query `{0}`")]
    MissingSubset(String),

    #[error("preference rate undefined: no record has set1 scored strictly above set2 ({excluded} excluded)")]
    UndefinedRate { excluded: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Stable short name used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Validation(_) => "validation",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidManifest(_) => "invalid_manifest",
            Error::UnknownId(_) => "unknown_id",
            Error::DegenerateQuery { .. } => "degenerate_query",
            Error::DegenerateImage => "degenerate_image",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Config(_) => "config",
            Error::MissingTruth(_) => "missing_truth",
            Error::MissingSubset(_) => "missing_subset",
            Error::UndefinedRate { .. } => "undefined_rate",
            Error::Json(_) => "json",
            Error::Context { .. } => unreachable!(),
        }
    }

    /// Whether the error stems from bad inputs (as opposed to a runtime failure).
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::Validation(_)
                | Error::NonFinite { .. }
                | Error::InvalidManifest(_)
                | Error::UnknownId(_)
                | Error::DimensionMismatch { .. }
                | Error::Config(_)
                | Error::MissingTruth(_)
                | Error::MissingSubset(_)
                | Error::Format(_)
                | Error::Corruption(_)
                | Error::Json(_)
        )
    }
}
