use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the workbench can report.
///
/// Variants map one-to-one onto the error kinds surfaced by the CLI and the
/// HTTP service, so callers can branch on them without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dataset structure: {0}")]
    Structure(String),

    #[error("expected exactly 2 class directories under {dir}, found {found}")]
    ClassCount { dir: PathBuf, found: usize },

    #[error("dataset contains no images")]
    EmptyDataset,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("sample `{0}` has no ground-truth label")]
    MissingLabel(String),

    #[error("cannot decode image for sample `{sample_id}`: {message}")]
    Decode { sample_id: String, message: String },

    #[error("pretrained backbone unavailable: {0}")]
    BackboneUnavailable(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("no results to report")]
    EmptyResult,

    #[error("unlabeled pool is exhausted")]
    PoolExhausted,

    #[error("label submission does not match pending batch (missing: {missing:?}, unexpected: {unexpected:?})")]
    BatchMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("label for `{id}` already set by {existing}; refusing overwrite from {incoming}")]
    LabelConflict {
        id: String,
        existing: String,
        incoming: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Stable machine-readable code, used in CLI messages and HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io_error",
            Error::Structure(_) => "structure_error",
            Error::ClassCount { .. } => "class_count_error",
            Error::EmptyDataset => "empty_dataset",
            Error::Parse { .. } => "parse_error",
            Error::DuplicateId(_) => "duplicate_id",
            Error::Range(_) => "range_error",
            Error::MissingLabel(_) => "missing_label",
            Error::Decode { .. } => "decode_error",
            Error::BackboneUnavailable(_) => "backbone_unavailable",
            Error::Divergence { .. } => "divergence",
            Error::Version { .. } => "version_error",
            Error::Checksum(_) => "checksum_error",
            Error::Shape(_) => "shape_error",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::EmptyResult => "empty_result",
            Error::PoolExhausted => "pool_exhausted",
            Error::BatchMismatch { .. } => "batch_mismatch",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not_found",
            Error::Integrity(_) => "integrity_error",
            Error::LabelConflict { .. } => "label_conflict",
            Error::Config(_) => "config_error",
            Error::Json { .. } => "json_error",
        }
    }
}
