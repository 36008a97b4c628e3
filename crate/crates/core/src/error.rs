use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FsError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("mask has no foreground cells")]
    EmptyMask,

    /// A mask without foreground or without background. `support` is the
    /// index of the offending support in K-shot calls.
    #[error("degenerate mask{}: needs both foreground and background cells", support.map(|k| format!(" (support {k})")).unwrap_or_default())]
    DegenerateMask { support: Option<usize> },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FsError::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        FsError::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FsError::Io {
            path: path.into(),
            source,
        }
    }
}
