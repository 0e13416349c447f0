use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: String,
        found: String,
    },

    #[error("{op}: degenerate output on {axis} (extent {extent}, kernel {kernel}, stride {stride})")]
    DegenerateOutput {
        op: &'static str,
        axis: &'static str,
        extent: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("invalid axis {axis} for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}: batch has no elements")]
    EmptyBatch(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing saved activations: {0}")]
    MissingCache(&'static str),

    #[error("nothing to crop: every pixel of the video is zero")]
    EmptyVideo,

    #[error("bin schedule is empty")]
    EmptySchedule,

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("split `{0}` has no videos")]
    EmptySplit(String),

    #[error("window {got} received out of order (expected {expected})")]
    OutOfOrderWindow { expected: usize, got: usize },

    #[error("position outside schedule domain: epoch {epoch}")]
    OutsideSchedule { epoch: usize },

    #[error("learning-rate range test diverged after {iters} iterations")]
    EarlyDivergence { iters: usize },

    #[error("architecture mismatch: checkpoint holds `{found}`, expected `{expected}`")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
