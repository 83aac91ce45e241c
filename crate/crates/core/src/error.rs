use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("response is constant ({value}) and the intercept is unpenalized; the intercept diverges")]
    DivergingIntercept { value: f64 },

    #[error("all responses are identical; cross-validation deviance is undefined")]
    ConstantResponse,

    #[error("degenerate overlap: {0}")]
    DegenerateOverlap(String),

    #[error("covariance matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("degenerate Toeplitz block: block size {0} < 2")]
    DegenerateBlock(usize),

    #[error("coefficient constraint infeasible after {attempts} attempts")]
    ConstraintInfeasible { attempts: usize },

    #[error("bootstrap failed: {failed} of {total} replicates had a single-class response")]
    Bootstrap { failed: usize, total: usize },

    #[error("experiment failed: {failed} of {total} rounds failed")]
    Experiment { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid study: {0}")]
    InvalidStudy(String),
}

pub type Result<T> = std::result::Result<T, Error>;
