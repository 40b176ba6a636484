use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error in {op}: non-positive input at index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("tape state error: {0}")]
    State(String),

    #[error("normalization error: feature row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("insufficient correspondences: need at least {required}, got {actual}")]
    InsufficientCorrespondences { required: usize, actual: usize },

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("scene generation error: {0}")]
    Generation(String),

    #[error("optimizer consistency error: {0}")]
    Consistency(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("scene {scene}: {source}")]
    Scene {
        scene: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("version error: {0}")]
    Version(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_scene(self, scene: usize) -> Self {
        match self {
            e @ Error::Scene { .. } => e,
            e => Error::Scene {
                scene,
                source: Box::new(e),
            },
        }
    }
}
