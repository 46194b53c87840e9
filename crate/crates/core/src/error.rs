use thiserror::Error;

use crate::data::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: time {t} outside [0, 1]")]
    TimeOutOfRange { row: usize, t: f64 },

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("subject `{subject}`: first z column is not the intercept (all ones)")]
    InterceptColumn { subject: String },

    #[error("dataset failed validation ({} violation(s)); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("point {t:?} outside [0, 1]")]
    OutOfDomain { t: f64 },

    #[error("spline dimension {kn} is below degree + 1 = {}", .degree + 1)]
    SplineDimension { kn: usize, degree: usize },

    #[error("empty kernel window at {at}")]
    EmptyWindow { at: String },

    #[error("local system singular at {at}")]
    Singular { at: String },

    #[error("rank deficiency in block {block}: pivot {pivot:e} vs largest {largest:e}")]
    RankDeficient {
        block: &'static str,
        pivot: f64,
        largest: f64,
    },

    #[error("matrix not positive definite (smallest eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("every bandwidth candidate failed cross-validation")]
    AllCandidatesFailed,

    #[error("step {step}: {source}")]
    Step { step: u8, source: Box<Error> },

    #[error("{failed} of {total} Monte Carlo replications failed")]
    TooManyFailures { failed: usize, total: usize },
}

impl Error {
    pub(crate) fn at_step(step: u8) -> impl FnOnce(Error) -> Error {
        move |e| match e {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the numerical kind, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Step { source, .. } => source.is_numerical(),
            Error::EmptyWindow { .. }
            | Error::Singular { .. }
            | Error::RankDeficient { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::AllCandidatesFailed
            | Error::TooManyFailures { .. } => true,
            _ => false,
        }
    }
}
