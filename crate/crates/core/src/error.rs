use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{0}: selected region is empty")]
    EmptyRegion(&'static str),

    #[error("window size {window} does not fit a {height}x{width} feature map")]
    WindowSize {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("patch grid is inconsistent: {0}")]
    Consistency(String),

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: String, index: usize },

    #[error("no support patch carries foreground pixels")]
    NoValidSupport,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed at byte {offset}: {reason}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("episode generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
