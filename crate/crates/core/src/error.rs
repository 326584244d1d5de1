use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        what: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("invalid label {value} at pixel {pixel} (num_classes = {num_classes})")]
    InvalidLabel {
        pixel: usize,
        value: u8,
        num_classes: usize,
    },

    #[error("non-finite loss at iteration {iter} (lr = {lr:e}, batch = {batch_ids:?})")]
    NonFiniteLoss {
        iter: usize,
        lr: f64,
        batch_ids: Vec<String>,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        what: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            op,
            what: what.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?} (expected \"DPYR\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("duplicate entry name {0:?}")]
    NameCollision(String),

    #[error("entry name is not valid UTF-8")]
    BadName,

    #[error("missing entry {0:?}")]
    Missing(String),

    #[error("entry {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("trailing bytes after last entry")]
    TrailingBytes,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest row {row}: file not found: {path}")]
    MissingFile { row: usize, path: PathBuf },

    #[error("manifest row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("manifest row {row}: mask label {value} >= num_classes {num_classes}")]
    LabelOutOfRange { row: usize, value: u8, num_classes: usize },

    #[error("manifest header must be \"image,mask,fold\", found {0:?}")]
    BadHeader(String),

    #[error("folds must form a contiguous range 0..F, found {0:?}")]
    NonContiguousFolds(Vec<usize>),

    #[error("class list not found at {0}")]
    MissingClasses(PathBuf),

    #[error("image decode failed for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("image {path} has size {got:?}, expected {expected:?}")]
    SizeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        got: (usize, usize),
    },
}
