use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable #{0} is not recorded on this tape")]
    UnknownVar(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("identity {identity} has {count} instances, at least {required} required")]
    TooFewInstances {
        identity: usize,
        count: usize,
        required: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
