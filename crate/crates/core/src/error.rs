use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch ({detail})")]
    Shape {
        primitive: &'static str,
        detail: String,
    },

    #[error("numeric divergence in {primitive}")]
    NumericDivergence { primitive: &'static str },

    #[error("numeric divergence at iteration {iteration}: {source}")]
    DivergedAt {
        iteration: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("epoch {epoch} out of range for a {total}-epoch schedule")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("infeasible mutation: {constraint} not satisfied after {attempts} attempts")]
    InfeasibleMutation {
        constraint: &'static str,
        attempts: usize,
    },

    #[error("budget infeasible: no candidate under the MAdds cap (minimum sampled {min_madds})")]
    BudgetInfeasible { min_madds: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown genome id {0}")]
    UnknownGenome(u64),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            primitive,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// True for errors that come from numeric instability during training.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericDivergence { .. } | Error::DivergedAt { .. }
        )
    }
}
