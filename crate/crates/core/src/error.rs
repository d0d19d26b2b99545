use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("segment too short: {len} frame(s), need at least 2")]
    SegmentTooShort { len: usize },
    #[error("degenerate onset phase: apex == onset ({index})")]
    OnsetDegenerate { index: usize },
    #[error("degenerate offset phase: apex == offset ({index})")]
    OffsetDegenerate { index: usize },
    #[error("phase indices out of order or range: onset={onset} apex={apex} offset={offset} len={len}")]
    BadPhaseIndices {
        onset: usize,
        apex: usize,
        offset: usize,
        len: usize,
    },
    #[error("frame {index} has shape {found:?}, expected {expected:?}")]
    FrameShapeMismatch {
        index: usize,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("{role:?} segment cannot be pooled with {direction:?} weights")]
    PhaseDirectionMismatch {
        role: crate::dynimg::Phase,
        direction: crate::dynimg::Direction,
    },

    #[error("index out of range: {what} = {index}, but only {len} frames in {path}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
        path: PathBuf,
    },
    #[error("missing frame file: {0}")]
    MissingFrame(PathBuf),
    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad {format} file {path}: {message}")]
    Format {
        format: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("model configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("regularisation weight must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("empty batch")]
    EmptyBatch,

    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("LOSO needs at least two subjects, found {0}")]
    TooFewSubjects(usize),
    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the data (bad annotations, degenerate
    /// phases, unreadable frames) rather than by programming or usage mistakes.
    pub fn is_domain(&self) -> bool {
        !matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownStrategy { .. }
        )
    }
}
