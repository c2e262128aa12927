//! Shared error type for model construction, losses, training, and metrics.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum NclError {
    #[error("distribution does not normalize: {context} sums to {sum}")]
    NonStochastic { context: String, sum: f64 },

    #[error("sample {index} has zero marginal probability")]
    ZeroMarginal { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("label map mismatch: {0}")]
    LabelMapMismatch(String),

    #[error("class overlap requires at least two latent classes")]
    RequiresAtLeastTwoClasses,

    #[error("empty batch")]
    EmptyBatch,

    #[error("at least one negative sample is required")]
    EmptyNegatives,

    #[error("feature row {index} has zero norm and cannot be normalized")]
    ZeroNormFeature { index: usize },

    #[error("negative entry {value} at ({row}, {col}) in a non-negative factor")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("label {label} out of range for {n_labels} labels")]
    LabelOutOfRange { label: usize, n_labels: usize },

    #[error("non-finite input at position {index}")]
    NonFiniteInput { index: usize },

    #[error("sample index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("stale forward state: {0}")]
    StaleForwardState(String),

    #[error("training diverged at step {step}: loss is not finite")]
    DivergenceDetected { step: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("matrix is not symmetric: max |A - A^T| entry is {max_delta}")]
    NonSymmetricInput { max_delta: f64 },

    #[error("all feature dimensions are dead")]
    AllDimensionsDead,

    #[error("all feature rows have zero norm")]
    AllRowsZero,

    #[error("insufficient draws for the estimator: {0}")]
    InsufficientDraws(String),

    #[error("feature column {index} is identically zero")]
    ZeroColumn { index: usize },

    #[error("labels are degenerate: at least two distinct labels are required")]
    DegenerateLabels,

    #[error("unknown metric: {0}")]
    UnknownMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, NclError>;
