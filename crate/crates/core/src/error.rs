use thiserror::Error;

/// Errors produced by the environment, networks, and training loop.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid environment config: {0}")]
    InvalidEnvConfig(String),

    #[error("action has length {got}, expected {expected}")]
    ActionLength { got: usize, expected: usize },

    #[error("step called on a finished episode (call reset first)")]
    EpisodeFinished,

    #[error("rotation direction must be a unit vector (|dir| = {norm})")]
    NonUnitDirection { norm: f64 },

    #[error("rotation angle {theta} outside [0, pi]")]
    BadRotationAngle { theta: f64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("forward cache does not match this network")]
    StaleCache,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("rollout buffer has no computed advantages (run compute_gae + normalize first)")]
    MissingAdvantages,

    #[error("non-finite {quantity} during update {update} (diverged)")]
    NonFinite { quantity: String, update: usize },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}
