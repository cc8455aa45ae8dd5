use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: left has length {left}, right has length {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {message} (byte offset {offset})")]
    Idx {
        path: String,
        offset: usize,
        message: String,
    },

    #[error("partition: {0}")]
    Partition(String),

    #[error("degenerate parameter mass: weighted squared-norm sum {0:e} is below 1e-30")]
    DegenerateMass(f64),

    #[error("bound estimation: {0}")]
    Estimation(String),

    #[error("trajectory at optimum: no record with loss above the optimum proxy")]
    AtOptimum,

    #[error("trajectory file: {0}")]
    TrajectoryFormat(String),

    #[error("trajectory does not match experiment: {0}")]
    TrajectoryMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
