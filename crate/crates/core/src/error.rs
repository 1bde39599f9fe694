use thiserror::Error;

/// Process exit code for usage, configuration, and I/O failures.
pub const EXIT_USAGE: i32 = 2;
/// Process exit code for tolerance or acceptance failures.
pub const EXIT_TOLERANCE: i32 = 1;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("parse: line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("infeasible solution: {0}")]
    Infeasible(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("optimality gap undefined: ground-truth objective is zero")]
    UndefinedGap,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// All error variants map to the usage/config exit code; tolerance
    /// failures are reported by command return values, not by `Error`.
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}

pub type Result<T> = std::result::Result<T, Error>;
