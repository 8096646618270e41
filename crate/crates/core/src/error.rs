use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while loading a hardware description.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown key: {0}")]
    UnknownKey(String),
    #[error("invalid value for `{field}`: {message}")]
    InvalidValue { field: String, message: String },
    #[error("invariant violated on `{field}`: {invariant}")]
    Invariant { field: String, invariant: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

/// Top-level error for the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("operator `{op}` has no feasible mapping: {reason}")]
    Infeasible { op: String, reason: String },
    #[error("dependency graph contains a cycle through `{0}`")]
    CyclicGraph(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("{0}")]
    Io(String),
}

impl Error {
    /// True for errors that mean "this workload does not fit this machine",
    /// as opposed to malformed input.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible { .. } | Error::Capacity(_))
    }
}
