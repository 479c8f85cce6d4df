use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid observation space {x_card}x{y_card}: need x_card >= 1 and y_card >= 2")]
    InvalidSpace { x_card: usize, y_card: usize },

    #[error("observation {obs} out of range for z_card = {z_card}")]
    ObservationOutOfRange { obs: usize, z_card: usize },

    #[error("sequence length {got} does not match expected length {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("table needs {needed} entries, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },

    #[error("orbit enumeration needs n+1 <= {max}, got {got}")]
    OrbitTooLarge { max: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("nonconformity measure is not binary: score {0}")]
    NotBinary(f64),

    #[error("stage `{stage}` failed its oracle check: {detail}")]
    StageFailed { stage: String, detail: String },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
