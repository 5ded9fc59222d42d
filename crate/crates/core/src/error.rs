use thiserror::Error;

/// Errors raised by the attribution engine.
///
/// Budget exhaustion is deliberately absent: procedures that run out of
/// samples report `converged = false` and leave the decision to the caller.
#[derive(Debug, Error)]
pub enum AttrError {
    #[error("model evaluation failed: {0}")]
    EvaluationFailure(String),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("too many features: {got} (limit {limit})")]
    TooManyFeatures { got: usize, limit: usize },

    #[error("singular coalition design")]
    SingularDesign,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("non-positive gap {0} between ranked estimates")]
    NonPositiveGap(f64),

    #[error("degenerate design: all residual correlations are zero")]
    DegenerateDesign,

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("bridge handshake failed: {0}")]
    BridgeHandshake(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AttrError> = std::result::Result<T, E>;
