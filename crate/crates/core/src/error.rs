use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum NirError {
    #[error("cannot normalize a zero vector (norm {0:e})")]
    ZeroVector(f64),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("no negative proxies available (C = {0})")]
    NoNegativeProxies(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {0} has no proxy")]
    MissingProxy(usize),

    #[error("synthetic batch is empty")]
    EmptySynthetic,

    #[error("insufficient classes: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate spectrum: all singular values below 1e-12")]
    DegenerateSpectrum,

    #[error("shape mismatch in parameter group '{group}': params {params}, grads {grads}")]
    ShapeMismatch {
        group: String,
        params: usize,
        grads: usize,
    },

    #[error("non-finite gradient in parameter group '{0}'")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown config key '{0}'")]
    UnknownKey(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("gradient check failed: max relative error {max_rel_error:e} exceeds {tolerance:e}")]
    GradientCheck { max_rel_error: f64, tolerance: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NirError {
    /// Short category tag used by the CLI's error line.
    pub fn category(&self) -> &'static str {
        match self {
            NirError::ZeroVector(_)
            | NirError::DimensionMismatch { .. }
            | NirError::ShapeMismatch { .. } => "shape",
            NirError::NoNegativeProxies(_)
            | NirError::EmptyBatch
            | NirError::MissingProxy(_)
            | NirError::EmptySynthetic
            | NirError::InsufficientClasses { .. }
            | NirError::InsufficientSamples(_)
            | NirError::DegenerateSpectrum => "data",
            NirError::NonFiniteGradient(_)
            | NirError::NonFiniteLoss { .. }
            | NirError::GradientCheck { .. } => "numeric",
            NirError::InvalidSpec(_) | NirError::InvalidConfig(_) | NirError::UnknownKey(_) => {
                "config"
            }
            NirError::Format(_) | NirError::VersionMismatch { .. } => "format",
            NirError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, NirError>;
