use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface. Each variant carries a stable
/// machine-readable code (see [`Error::code`]) that the CLI emits.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: label `{value}` is not an integer in 1..=5")]
    BadLabel { row: usize, value: String },
    #[error("row {row}: feature column `{column}` has non-numeric value `{value}`")]
    BadFeatureValue { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("duplicate report id `{0}`")]
    DuplicateReportId(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("cohort has no reports")]
    EmptyCohort,
    #[error("feature schema must contain at least one feature")]
    EmptySchema,
    #[error("invalid class mapping: {0}")]
    InvalidMapping(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid threshold grid: {0}")]
    InvalidGrid(String),
    #[error("input is empty")]
    EmptyInput,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("community of `{0}` is empty")]
    EmptyCommunity(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("row width {found} does not match model width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("insufficient rows for {folds}-fold cross-validation: {detail}")]
    InsufficientRows { folds: usize, detail: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no class has both positive and negative examples")]
    NoEligibleClass,
    #[error("cohort has no context column")]
    MissingContextColumn,
    #[error("insufficient `{context}` reports: need {needed}, have {available}")]
    InsufficientContextReports {
        context: String,
        needed: usize,
        available: usize,
    },
    #[error("train and test overlap for user `{user}`, repeat {repeat}")]
    Leakage { user: String, repeat: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "missing_column",
            Error::BadLabel { .. } => "bad_label",
            Error::BadFeatureValue { .. } => "bad_feature_value",
            Error::RaggedRow { .. } => "ragged_row",
            Error::DuplicateReportId(_) => "duplicate_report_id",
            Error::DuplicateColumn(_) => "duplicate_column",
            Error::EmptyCohort => "empty_cohort",
            Error::EmptySchema => "empty_schema",
            Error::InvalidMapping(_) => "invalid_mapping",
            Error::UnknownUser(_) => "unknown_user",
            Error::InvalidThreshold(_) => "invalid_threshold",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::EmptyInput => "empty_input",
            Error::InsufficientData(_) => "insufficient_data",
            Error::EmptyCommunity(_) => "empty_community",
            Error::EmptyTrainingSet => "empty_training_set",
            Error::WidthMismatch { .. } => "width_mismatch",
            Error::InsufficientRows { .. } => "insufficient_rows",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::NoEligibleClass => "no_eligible_class",
            Error::MissingContextColumn => "missing_context_column",
            Error::InsufficientContextReports { .. } => "insufficient_context_reports",
            Error::Leakage { .. } => "leakage",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
