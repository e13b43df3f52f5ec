use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {msg}")]
    Malformed { what: String, msg: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch at node `{node}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unknown operator kind `{0}`")]
    UnknownKind(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("graph contains a cycle through `{0}`")]
    Cycle(String),

    #[error("invalid node `{node}`: {msg}")]
    InvalidNode { node: String, msg: String },

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("error model database: {0}")]
    Db(String),

    #[error("pattern {variant} cannot be generated for shape {shape:?}")]
    ImpossiblePattern { variant: String, shape: Vec<usize> },

    #[error("no error model for operator kinds: {}", .0.join(", "))]
    MissingKinds(Vec<String>),

    #[error("invalid campaign config: {0}")]
    Config(String),

    #[error("classification policy: {0}")]
    Policy(String),

    #[error("corpus: {0}")]
    Corpus(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Malformed {
            what: what.into(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn node(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidNode {
            node: node.into(),
            msg: msg.into(),
        }
    }
}
