use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The Fisher information at a zero signal is singular.
    #[error("singular model: {0}")]
    SingularModel(String),

    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    #[error("gradient descent diverged at iteration {iteration} (step size mu = {mu}); try a smaller mu")]
    Diverged { mu: f64, iteration: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("replication {rep_id} failed during {stage}: {source}")]
    Replication {
        rep_id: u64,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by bad input or configuration rather than
    /// by the numerics.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Json(_) => true,
            Error::Replication { source, .. } => source.is_config_error(),
            _ => false,
        }
    }

    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularModel(_)
            | Error::DegenerateEstimate(_)
            | Error::Diverged { .. }
            | Error::Numeric(_) => true,
            Error::Replication { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
