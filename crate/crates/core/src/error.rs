use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while loading or validating a sweep recording.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("frame {frame}: expected {expected:?} pixels, found {found:?}")]
    DimensionMismatch {
        frame: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("timestamps not strictly increasing at frame {frame}")]
    NonMonotoneTimestamps { frame: usize },
    #[error("negative contact force {force} at frame {frame}")]
    NegativeForce { frame: usize, force: f64 },
    #[error("pose at frame {frame} is not a proper rotation")]
    NonOrthonormalPose { frame: usize },
    #[error("recording needs at least 2 frames, found {0}")]
    TooFewFrames(usize),
    #[error("log has {log} rows but {frames} frame files")]
    RowCountMismatch { log: usize, frames: usize },
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    /// A numerical procedure failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("optimizer diverged at iteration {iteration} (last losses {trace:?})")]
    Divergence { iteration: usize, trace: Vec<f64> },
    #[error("no trackable features in reference image")]
    NoFeatures,
    #[error("no vessel found ({0})")]
    NoVessel(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Domain(_) | Error::Invalid(_) | Error::Load(_) => ErrorClass::Validation,
            Error::Numerical(_)
            | Error::Divergence { .. }
            | Error::NoFeatures
            | Error::NoVessel(_) => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
            Error::Stage { source, .. } => source.class(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
