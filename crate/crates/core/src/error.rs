use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {what} at line {line}, column {column}: {source}")]
    Parse {
        what: &'static str,
        line: usize,
        column: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("layer range [{lo},{hi}) is empty or outside [0,{n})")]
    InvalidRange { lo: usize, hi: usize, n: usize },
    #[error("unknown device id {0}")]
    UnknownDevice(usize),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid phi: {0}")]
    InvalidPhi(String),
    #[error("requested {requested} GPUs but only {free} are free")]
    InsufficientGpus { requested: usize, free: usize },
    #[error("no feasible plan: {0}")]
    Infeasible(String),
    #[error("search limits exceeded: {0}")]
    LimitsExceeded(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn parse(what: &'static str, source: serde_json::Error) -> Self {
        Error::Parse { what, line: source.line(), column: source.column(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
