use thiserror::Error;

/// Errors raised by basis construction, model evaluation and fitting.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum GcaError {
    #[error("invalid spline specification: {0}")]
    InvalidSpec(String),

    #[error("evaluation point {x} outside spline boundary [{lower}, {upper}]")]
    OutOfRange { x: f64, lower: f64, upper: f64 },

    #[error("variance function is not positive (g = {value:.3e} at v = {at})")]
    NonPositiveVariance { value: f64, at: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("covariance matrix is singular: {0}")]
    SingularCovariance(String),

    #[error("unsupported random-effects dimension q = {0} (only q <= 1 supported here)")]
    UnsupportedDimension(usize),

    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("no bootstrap replicates available")]
    EmptyReplicates,

    #[error("all candidate models failed to fit")]
    AllCandidatesFailed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("unknown subject '{0}'")]
    UnknownSubject(String),

    #[error("unsupported formula: {0}")]
    UnsupportedFormula(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GcaError {
    fn from(e: std::io::Error) -> Self {
        GcaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, GcaError>;
