use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the core library.
///
/// [`Error::code`] gives a stable machine-readable identifier used by the CLI
/// and the HTTP service.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("duplicate dimension `{0}`")]
    DuplicateDimension(String),

    #[error("dimension `{0}` has no categories")]
    EmptyCategories(String),

    #[error("duplicate category `{category}` in dimension `{dimension}`")]
    DuplicateCategory { dimension: String, category: String },

    #[error("all expected weights are zero")]
    AllZeroWeights,

    #[error("weight at index {index} is negative or not finite ({value})")]
    InvalidWeight { index: usize, value: f64 },

    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),

    #[error("duplicate name `{0}`")]
    DuplicateName(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    OutOfRange(String),

    #[error("data has zero variance; nothing to project")]
    ZeroVariance,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("candidate pool exhausted: need {needed}, have {available}")]
    PoolExhausted { needed: usize, available: usize },

    #[error("stale plan: {0}")]
    StalePlan(String),

    #[error("version conflict: expected {expected}, current {current}")]
    VersionConflict { expected: u64, current: u64 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("project already exists at {0}")]
    ProjectExists(PathBuf),

    #[error("project is locked by another writer ({0})")]
    Locked(PathBuf),

    #[error("corrupted event log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateDimension(_) => "duplicate-dimension",
            Error::EmptyCategories(_) => "empty-categories",
            Error::DuplicateCategory { .. } => "duplicate-category",
            Error::AllZeroWeights => "all-zero-weights",
            Error::InvalidWeight { .. } => "invalid-weight",
            Error::UnknownDimension(_) => "unknown-dimension",
            Error::DuplicateName(_) => "duplicate-name",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::OutOfRange(_) => "out-of-range",
            Error::ZeroVariance => "zero-variance",
            Error::Empty(_) => "empty",
            Error::PoolExhausted { .. } => "pool-exhausted",
            Error::StalePlan(_) => "stale-plan",
            Error::VersionConflict { .. } => "version-conflict",
            Error::NotFound(_) => "not-found",
            Error::Invalid(_) => "invalid",
            Error::ProjectExists(_) => "project-exists",
            Error::Locked(_) => "locked",
            Error::CorruptLog { .. } => "corrupt-log",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// True when the error was caused by the caller's input rather than by
    /// the environment (I/O failures, corrupted files).
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::CorruptLog { .. })
    }
}
