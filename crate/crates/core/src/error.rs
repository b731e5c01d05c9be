use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("homography is not invertible (|det| = {0:e})")]
    NonInvertible(f64),

    #[error("plane gives no positive depth at pixel ({x:.3}, {y:.3})")]
    InvalidDepth { x: f64, y: f64 },

    #[error("point maps behind the target camera")]
    BehindCamera,

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },

    #[error("malformed file {}: {reason}", path.display())]
    MalformedFile { path: PathBuf, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sparse depth map has no valid measurements")]
    EmptyMeasurements,

    #[error("need at least 3 anchors with valid depth, found {0}")]
    InsufficientAnchors(usize),

    #[error("conjugate gradients diverged: residual grew from {initial:e} to {current:e}")]
    CgDiverged { initial: f64, current: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid synthetic scene spec: {0}")]
    SpecInvalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Error {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
