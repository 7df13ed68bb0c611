use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// `1 - u'Pu` fell below the downdate tolerance; the cached inverse must be
    /// recomputed from scratch.
    #[error("singular rank-1 downdate: 1 - u'Pu = {denominator:e} <= tol {tol:e}")]
    SingularDowndate { denominator: f64, tol: f64 },

    #[error("rank deficient: lambda_{rank} = {lambda:e}")]
    RankDeficient { rank: usize, lambda: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("iterate became non-finite at step {step}")]
    NonFinite { step: u64 },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate rating for user {user}, item {item} at line {line}")]
    DuplicateRating { line: usize, user: u64, item: u64 },

    #[error("item {0} has no ratings")]
    EmptyColumn(usize),

    #[error("could only produce {found} of {requested} distinct labeled triples")]
    InsufficientTriples { requested: usize, found: usize },

    #[error("requested {requested} samples but only {available} are available")]
    SizeOverflow { requested: usize, available: usize },

    #[error("empty sample set")]
    EmptySet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
