use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures raised anywhere in the engine.
///
/// The variants are grouped by how a caller is expected to react: bad input
/// (`Config`, `Parse`, `Input`, `Lookup`), numerical breakdown (`Numerical`),
/// and identity violations between stored state and fresh inputs (`Audit`,
/// `StateMismatch`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite target at path {path}")]
    NonFiniteTarget { path: usize },

    #[error("unknown {what}: {name}")]
    Lookup { what: &'static str, name: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("audit error: {0}")]
    Audit(String),

    #[error("state mismatch: {0}")]
    StateMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("pipeline is not deterministic: base evaluations {first} and {second} differ")]
    Nondeterministic { first: f64, second: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn lookup(what: &'static str, name: impl Into<String>) -> Self {
        Error::Lookup {
            what,
            name: name.into(),
        }
    }

    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        Error::Parse {
            line: err.line(),
            message: err.to_string(),
        }
    }
}
