use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A state or input lies outside the configured box.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("closure error: {0}")]
    Closure(String),

    #[error("invalid hyperparameters: {0}")]
    Hyper(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },

    #[error("transfer error: {0}")]
    Transfer(String),

    /// The requested grid or evaluation count exceeds the configured budget.
    #[error("budget exceeded: {what} requires {required} but the budget is {budget}")]
    Budget {
        what: String,
        required: u128,
        budget: u128,
    },

    #[error("composition refused: {0}")]
    Composition(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
