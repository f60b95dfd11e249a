use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("PLY format error: {0}")]
    Format(String),

    #[error("validation error at vertex {index}: {message}")]
    Validation { index: usize, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("guidance unavailable: {0}")]
    GuidanceUnavailable(String),

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding error: {0}")]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
