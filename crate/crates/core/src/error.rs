use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid permutation map: {0}")]
    InvalidMap(String),
    #[error("rank mismatch: layout has rank {layout}, map has rank {map}")]
    RankMismatch { layout: usize, map: usize },
    #[error("buffer size mismatch: expected {expected} bytes, got {actual}")]
    BufferSize { expected: usize, actual: usize },
    #[error("unsupported machine: {0}")]
    UnsupportedMachine(String),
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("inconsistent generator inputs: {0}")]
    Inconsistent(String),
    #[error("register demand {demand} exceeds budget {budget}")]
    RegisterBudget { demand: usize, budget: usize },
    #[error("vm fault: {0}")]
    Vm(String),
    #[error("ir parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported target {isa}: no lowering for {op}")]
    UnsupportedTarget { isa: String, op: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable short code used by the CLI for machine-parsable failures.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidLayout(_) => "E_LAYOUT",
            Error::InvalidMap(_) => "E_MAP",
            Error::RankMismatch { .. } => "E_RANK",
            Error::BufferSize { .. } => "E_BUFFER",
            Error::UnsupportedMachine(_) => "E_MACHINE",
            Error::Planning(_) => "E_PLAN",
            Error::Inconsistent(_) => "E_INCONSISTENT",
            Error::RegisterBudget { .. } => "E_REGISTERS",
            Error::Vm(_) => "E_VM",
            Error::Parse { .. } => "E_PARSE",
            Error::UnsupportedTarget { .. } => "E_TARGET",
            Error::Io(_) => "E_IO",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
