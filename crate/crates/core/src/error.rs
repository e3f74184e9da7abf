use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent did not line up with what an operation requires.
    #[error("{context}: dimension mismatch on axis `{axis}` (expected {expected}, got {actual})")]
    Dimension {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{context}: index {index} out of range for `{what}` (len {len})")]
    Index {
        context: &'static str,
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("weight file corrupt: {0}")]
    Corrupt(String),

    /// The weight store lacks a tensor the configured model needs.
    #[error("incomplete weights: missing tensor `{0}`")]
    MissingTensor(String),

    #[error("parse error in {source_name}: {message}")]
    Parse {
        source_name: String,
        message: String,
    },

    #[error("image error: {0}")]
    Image(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(
        context: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    ) -> Self {
        Error::Dimension {
            context,
            axis,
            expected,
            actual,
        }
    }

    /// Process exit status for the CLI: 1 for validation failures, 2 for I/O and format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Index { .. }
            | Error::InvalidArgument(_)
            | Error::Validation(_)
            | Error::Contract(_)
            | Error::MissingTensor(_) => 1,
            Error::Format(_)
            | Error::Corrupt(_)
            | Error::Parse { .. }
            | Error::Image(_)
            | Error::Io(_) => 2,
        }
    }
}

pub(crate) fn ensure_eq(
    context: &'static str,
    axis: &'static str,
    expected: usize,
    actual: usize,
) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(context, axis, expected, actual))
    }
}
