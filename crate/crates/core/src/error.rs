use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tied times in pooled sample: {times:?}")]
    TieViolation { times: Vec<f64> },

    #[error("subject {subject}: negative or non-positive time {value}")]
    NegativeTime { subject: usize, value: f64 },

    #[error("subject {subject}: event at {event} after observation time {observation}")]
    EventAfterObservation {
        subject: usize,
        event: f64,
        observation: f64,
    },

    #[error("subject {subject}: covariate dimension {found}, expected {expected}")]
    DimensionMismatch {
        subject: usize,
        expected: usize,
        found: usize,
    },

    #[error("subject {subject}: non-finite value in {field}")]
    NonFinite { subject: usize, field: &'static str },

    #[error("sample contains no subjects")]
    EmptySample,

    #[error("{path}: line {line}, field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate denominator 1 - G(t-) = 0 at t = {time}")]
    DegenerateDenominator { time: f64 },

    #[error("no covariate index within one bandwidth of u = {u}")]
    EmptyWindow { u: f64 },

    #[error("every subject is trimmed out")]
    AllTrimmed,

    #[error("optimizer hit the iteration cap on all {starts} starts")]
    OptimizerDiverged { starts: usize },

    #[error("sigma matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularSigma { condition: f64 },

    #[error("every candidate weight measure produced a singular sigma matrix")]
    AllCandidatesSingular,

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{failed} of {total} replications failed")]
    ExcessiveFailures { failed: usize, total: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
