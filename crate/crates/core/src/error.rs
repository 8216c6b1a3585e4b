use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

/// Errors produced anywhere in the forecasting toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("duplicate entry for location {location} on {date} ({path}:{line})")]
    Conflict {
        path: PathBuf,
        line: u64,
        location: String,
        date: NaiveDate,
    },

    #[error("dates are not contiguous: gap between {before} and {after}")]
    DateGap { before: NaiveDate, after: NaiveDate },

    #[error("missing value for location {location} on {date}")]
    MissingCell { location: String, date: NaiveDate },

    #[error("no population for location {0}")]
    MissingPopulation(String),

    #[error("unknown location {0}")]
    UnknownLocation(String),

    #[error("unknown channel {0}")]
    UnknownChannel(String),

    #[error("degenerate channel {channel}: min == max == {value}")]
    DegenerateChannel { channel: String, value: f64 },

    #[error("connectivity: missing pair ({0}, {1})")]
    MissingPair(String, String),

    #[error("connectivity: asymmetric pair ({a}, {b}): {ab} vs {ba}")]
    Asymmetric { a: String, b: String, ab: f64, ba: f64 },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("missing ensemble members: {0}")]
    MissingMembers(String),

    #[error("missing truth: {0}")]
    MissingTruth(String),

    #[error("integrator: {0}")]
    Integrator(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

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

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
