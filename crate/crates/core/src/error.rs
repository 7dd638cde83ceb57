use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("unknown table `{table}`")]
    UnknownTable { table: String },

    #[error("{path}: header is missing required columns: {}", missing.join(", "))]
    HeaderMismatch { path: PathBuf, missing: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("absolute time has no ICU admission anchor")]
    MissingAnchor,

    #[error("empty diagnosis code")]
    EmptyCode,

    #[error("sepsis-3 cohort requested but no sepsis-3 predicate is configured; supply one through the library API (Sepsis3Hook)")]
    NoSepsisHook,

    #[error("labels contain a single class; the metric or model is undefined")]
    SingleClass,

    #[error("feature `{0}` contains a non-finite value")]
    NonFinite(String),

    #[error("feature fingerprint mismatch: model expects {expected}, data has {found}")]
    Fingerprint { expected: String, found: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
