use thiserror::Error;

#[derive(Debug, Error)]
pub enum MestError {
    #[error("invalid loss specification: {0}")]
    InvalidLoss(String),
    #[error("invalid design specification: {0}")]
    InvalidSpec(String),
    #[error("invalid error model: {0}")]
    InvalidModel(String),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("Newton iteration failed to converge after {iterations} steps (grad norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("factorization failure: {0}")]
    FactorizationFailure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty sample")]
    EmptySample,
    #[error("too many replication failures: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}
