use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}, line {line}: {message}")]
    Row {
        file: String,
        line: u64,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("too few observations: {0}")]
    TooFewObservations(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("mode search did not converge after {iterations} iterations (gradient norms: {trace:?})")]
    ModeNotConverged { iterations: usize, trace: Vec<f64> },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
