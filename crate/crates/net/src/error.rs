use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("bad magic bytes: not a CDPA container")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("container is truncated")]
    Truncated,

    #[error("{0} unexpected bytes after the checksum footer")]
    TrailingBytes(usize),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed tensor header: {0}")]
    BadHeader(String),

    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: u8 },

    #[error("tensor `{0}` appears more than once")]
    DuplicateTensor(String),

    #[error("tensor `{name}` holds a non-finite value at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("invalid descriptor: {0}")]
    BadDescriptor(String),

    #[error("tensor `{0}` required by the descriptor is missing")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, descriptor requires {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` is not used by the descriptor")]
    UnexpectedTensor(String),

    #[error("invalid argument in {layer}: {message}")]
    InvalidArgument { layer: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

impl NetError {
    pub(crate) fn invalid(layer: impl Into<String>, message: impl Into<String>) -> Self {
        NetError::InvalidArgument { layer: layer.into(), message: message.into() }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        NetError::Io { path: path.to_path_buf(), source }
    }
}

impl From<NetError> for cdpa_core::Error {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io { path, source } => cdpa_core::Error::Io { path, source },
            other => cdpa_core::Error::InvalidArgument(other.to_string()),
        }
    }
}
