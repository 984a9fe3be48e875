use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error(
        "covariance is rank deficient: smallest eigenvalue {smallest:e} <= {limit:e} x largest {largest:e}"
    )]
    RankDeficient {
        smallest: f64,
        largest: f64,
        limit: f64,
    },

    #[error("degenerate direction: update norm {norm:e} below threshold")]
    DegenerateDirection { norm: f64 },

    #[error("failed to extract component {component} after {restarts} restarts")]
    ExtractionFailed { component: usize, restarts: usize },

    #[error("no connected graph after {attempts} draws")]
    GraphGeneration { attempts: usize },

    #[error("graph is not connected")]
    Disconnected,

    #[error("singular compressed covariance at iteration {iteration}, node {node}: {source}")]
    SingularCompressedCovariance {
        iteration: usize,
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("local solve failed at iteration {iteration}, node {node}: {source}")]
    LocalSolve {
        iteration: usize,
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("reference filter has zero norm")]
    InvalidReference,

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Config problems map to exit code 1, everything else to 2.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
