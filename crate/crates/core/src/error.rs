use thiserror::Error;

/// A precondition on an argument was violated.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("domain error: {0}")]
pub struct DomainError(pub String);

impl DomainError {
    pub fn new(msg: impl Into<String>) -> Self {
        DomainError(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlpError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    /// The predicted draw count exceeds the configured cap; nothing was sampled.
    #[error("budget refused: predicted {predicted} draws exceeds cap {cap}")]
    Budget { predicted: u128, cap: u64 },
    /// A brute-force reference was asked for more nesting than it allows.
    #[error("refused: nesting depth {k} exceeds {max}, predicted {predicted} normals")]
    Depth { k: usize, max: usize, predicted: u128 },
    /// The predicted draw count does not fit in the counter type.
    #[error("cost count overflows: would-be magnitude {magnitude:e}")]
    Overflow { magnitude: f64 },
}
