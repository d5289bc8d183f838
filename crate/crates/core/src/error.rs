use thiserror::Error;

use crate::editor::EditTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("malformed answer: {0}")]
    MalformedAnswer(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The preserved keys span the whole key space, so no edit can leave
    /// them untouched. Raise `d_k` or shrink the preserved set.
    #[error("no null space: preserved keys have rank {rank} in a {dim}-dimensional key space")]
    NoNullSpace { rank: usize, dim: usize },

    #[error("model initialisation failed: {0}")]
    Init(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("edit diverged in round {round}")]
    Divergence { round: usize, trace: Box<EditTrace> },

    #[error("attack failed: {0}")]
    Attack(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable identifier, used in CLI error JSON and sweep rows.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Param(_) => "param",
            Error::Range(_) => "range",
            Error::MalformedAnswer(_) => "malformed_answer",
            Error::Config(_) => "config",
            Error::NoNullSpace { .. } => "no_null_space",
            Error::Init(_) => "init",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Attack(_) => "attack",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }

    /// True for failures of the numerical pipeline rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NoNullSpace { .. } | Error::Numeric(_) | Error::Divergence { .. } | Error::Attack(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
