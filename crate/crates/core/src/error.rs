use std::path::PathBuf;

/// Errors surfaced by the generator, decoder, training and metric code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported rank {rank}: direct simulation needs rank {required}")]
    UnsupportedRank { rank: usize, required: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical stability: {message} (eigenvalue {eigenvalue:e})")]
    NumericalStability { message: String, eigenvalue: f64 },

    #[error("divergence at step {step}: {message}")]
    Divergence { step: u64, message: String },

    #[error("ingestion failed for {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
