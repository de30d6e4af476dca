use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {msg}")]
    Shape { node: usize, msg: String },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },

    #[error("root node {node} is not a scalar (shape {shape:?})")]
    NonScalarRoot { node: usize, shape: Vec<usize> },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("checksum mismatch: header crc32 {expected:#010x}, payload crc32 {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("unsupported container version {0}")]
    Version(u16),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            node,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
