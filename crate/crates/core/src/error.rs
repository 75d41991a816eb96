use thiserror::Error;

/// Errors surfaced by data validation, model construction, fitting, and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse column `{column}`: {message}")]
    ParseError {
        row: usize,
        column: String,
        message: String,
    },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("no observations with non-missing outcome remain")]
    EmptyData,
    #[error("degenerate time sample: {0}")]
    DegenerateTimes(String),
    #[error("knot ordering violated: {0}")]
    KnotOrdering(String),
    #[error("visit {visit} out of range for a categorical covariance with {k} scheduled visits")]
    VisitOutOfRange { visit: u32, k: usize },
    #[error("incompatible model specification: {0}")]
    IncompatibleSpec(String),
    #[error("time {0} is not a scheduled target month of this model")]
    UnscheduledTime(f64),
    #[error("singular fixed-effects design: {0}")]
    SingularDesign(String),
    #[error("optimization failed to produce a statistic: {0}")]
    NonConvergence(String),
    #[error("fixed-effect covariance matrix unavailable")]
    MissingVcov,
    #[error("covariance-parameter Hessian is singular")]
    SingularHessian,
    #[error("cluster-robust covariance requires at least 2 subjects, found {0}")]
    TooFewClusters(usize),
    #[error("corrupt or empty record file: {0}")]
    CorruptRecords(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
