use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A non-finite value showed up while evaluating or differentiating.
    #[error("numerical failure in `{op}`: non-finite value")]
    NumericalFailure { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("negative curvature persisted up to damping {damping:e}")]
    NegativeCurvature { damping: f64 },

    #[error("oracle unreliable: inner gradient norm {grad_norm:e} exceeds {threshold:e}")]
    OracleUnreliable { grad_norm: f64, threshold: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
