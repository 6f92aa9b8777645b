use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor did not have the shape a component requires.
    #[error("contract violation in {context}: expected {expected}, got {actual}")]
    Contract { context: String, expected: String, actual: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Checkpoint problems, one line per offending tensor.
    #[error("checkpoint rejected:\n{}", .0.join("\n"))]
    Checkpoint(Vec<String>),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sample `{id}`: {message}")]
    Sample { id: String, message: String },

    #[error("feature extractor failed: {0}")]
    Extractor(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Contract {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Fails with a contract violation unless `actual == expected`.
pub(crate) fn expect_shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::contract(context, expected, actual))
    }
}
