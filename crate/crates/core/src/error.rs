use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid bit value {value} at position {position}; bit tokens only hold -1 or +1")]
    InvalidBit { position: usize, value: f64 },

    #[error("{what} = {value} is out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: i64,
        range: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration mismatch on `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt {kind} file: {reason}")]
    Corrupt { kind: &'static str, reason: String },

    #[error("unsupported {kind} format version {found} (this build reads version {supported})")]
    Version {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
