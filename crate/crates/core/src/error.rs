use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes, expected \"RST1\"")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated payload, expected {expected} bytes after header, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: shape/length mismatch: {detail}")]
    ShapeLength { path: PathBuf, detail: String },
    #[error("{path}: non-finite value at flat index {index}")]
    NonFiniteValue { path: PathBuf, index: usize },
    #[error("{path}: malformed header: {detail}")]
    BadHeader { path: PathBuf, detail: String },

    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),
    #[error("manifest row {row}: unknown split tag `{tag}`")]
    UnknownSplit { row: usize, tag: String },
    #[error("manifest row {row}: ecoregion level {level} label {label} out of range (count {count})")]
    EcoregionOutOfRange {
        row: usize,
        level: usize,
        label: usize,
        count: usize,
    },
    #[error("manifest row {row}: referenced file {path} does not exist")]
    DanglingReference { row: usize, path: PathBuf },
    #[error("manifest row {row}: {detail}")]
    BadRow { row: usize, detail: String },
    #[error("CSV error: {0}")]
    Csv(String),

    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("modality `{0}` missing from normalization statistics")]
    MissingModality(String),
    #[error("raster for `{modality}` has shape {found:?}, expected {expected:?}")]
    ModalityShape {
        modality: String,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("record {id}: target required but `target_path` is missing")]
    MissingTarget { id: String },
    #[error("encounter rate {value} at species {index} outside [0, 1]")]
    RateOutOfRange { index: usize, value: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value at epoch {epoch}, batch {batch} ({detail})")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint config hash mismatch: checkpoint {found}, model {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::DanglingReference { .. } => ErrorKind::Io,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Config,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
