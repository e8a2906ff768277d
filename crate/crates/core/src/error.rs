use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    #[error("softmax support is empty: every index is excluded")]
    EmptySupport,

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask is empty: at least one view must be available")]
    EmptyMask,

    #[error("unknown view `{0}`")]
    UnknownView(String),

    #[error("index {index} out of range for cardinality {cardinality}")]
    CategoryOutOfRange { index: i64, cardinality: usize },

    #[error("row count mismatch in view `{view}`: expected {expected}, found {found}")]
    RowCount {
        view: String,
        expected: usize,
        found: usize,
    },

    #[error("malformed numeric field `{value}` in {path} (line {line}, column `{column}`)")]
    MalformedNumber {
        path: PathBuf,
        line: usize,
        column: String,
        value: String,
    },

    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::EmptySupport => "empty_support",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyMask => "empty_mask",
            Error::UnknownView(_) => "unknown_view",
            Error::CategoryOutOfRange { .. } => "category_out_of_range",
            Error::RowCount { .. } => "row_count",
            Error::MalformedNumber { .. } => "malformed_number",
            Error::FileNotFound(_) => "file_not_found",
            Error::Config(_) => "config",
            Error::DegenerateSplit(_) => "degenerate_split",
            Error::Metric(_) => "metric",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
