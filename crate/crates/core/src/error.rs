use std::path::PathBuf;

use thiserror::Error;
use xkt_autograd::TensorError;

#[derive(Debug, Error)]
pub enum KtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown {kind} id {id}")]
    Vocabulary { kind: &'static str, id: String },

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("line {line}: {msg}")]
    Value { line: u64, msg: String },

    #[error("{0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl KtError {
    pub fn contract(msg: impl Into<String>) -> Self {
        KtError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KtError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            KtError::NonFiniteGradient { .. }
                | KtError::Tensor(
                TensorError::NonFinite { .. }
                    | TensorError::DivisionByZero { .. }
                    | TensorError::NonFiniteObjective { .. }
            )
        )
    }
}

pub type Result<T> = std::result::Result<T, KtError>;
