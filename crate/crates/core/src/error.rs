//! Error taxonomy shared by every module, with the CLI exit-code mapping.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the process exit codes used by the CLI:
/// usage = 2, input/format = 3, numeric = 4, internal contract = 5.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad command invocation (missing flag, invalid value).
    #[error("usage: {0}")]
    Usage(String),

    /// Bad user-supplied data (empty corpus, unknown doc id, stale store).
    #[error("input: {0}")]
    Input(String),

    /// Malformed file contents.
    #[error("parse: {0} (line {1})")]
    Parse(String, usize),

    /// Inconsistent configuration (width mismatch, unknown key, bad rate).
    #[error("config: {0}")]
    Config(String),

    /// Shape mismatch inside the tensor engine.
    #[error("dimension: {0}")]
    Dimension(String),

    /// Non-finite values or a failed numeric check.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A violated internal invariant (tokenization drift, mutated teacher).
    #[error("contract: {0}")]
    Contract(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parsable category name, printed as `error[<category>]: ...`.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Input(_) => "input",
            Error::Parse(..) => "parse",
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Input(_) | Error::Parse(..) | Error::Config(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Dimension(_) | Error::Contract(_) => 5,
        }
    }

    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
