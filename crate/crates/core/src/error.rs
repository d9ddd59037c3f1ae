use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("point cloud {0} has no points")]
    EmptyCloud(String),

    #[error("degenerate extent: width {width} m, height {height} m")]
    DegenerateExtent { width: f64, height: f64 },

    #[error("unknown species label `{0}`")]
    UnknownSpecies(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no tree contours found in mask")]
    EmptyTree,

    #[error("crown segment is empty after removing the stem")]
    DegenerateCrown,

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: Box<Error> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
