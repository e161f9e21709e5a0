use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DraError {
    #[error("input shape error: {0}")]
    InputShape(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("inconsistent head set: {0}")]
    Consistency(String),
    #[error("state error: {0}")]
    State(String),
    #[error("degenerate prior: standard deviation is zero")]
    DegeneratePrior,
    #[error("data error: {0}")]
    Data(String),
    #[error("protocol not applicable: {0}")]
    ProtocolNotApplicable(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("incompatible parameters: {0}")]
    Incompatible(String),
    #[error("non-finite loss (per-head losses: {0})")]
    NonFiniteLoss(String),
}

pub type Result<T, E = DraError> = core::result::Result<T, E>;
