use std::path::PathBuf;

use sfad_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("ingestion error in {}: {location}: {message}", file.display())]
    Ingestion { file: PathBuf, location: String, message: String },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    Numerical { what: String, epoch: usize, batch: usize },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Tensor(TensorError::Io(_) | TensorError::Format(_)) => 4,
            Error::Tensor(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Ingestion { .. } | Error::Io { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

/// Tags errors from a pipeline stage.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage, source: Box::new(e.into()) })
    }
}
