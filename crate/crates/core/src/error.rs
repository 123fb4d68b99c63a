use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("constraint violation: {}", .0.join("; "))]
    ConstraintViolation(Vec<String>),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("negative photon count {value} at bin {index}")]
    NegativeCount { index: usize, value: f64 },

    #[error("manifest row {row}: referenced file {} does not exist", .path.display())]
    MissingFile { row: usize, path: PathBuf },

    #[error("manifest schema error at line {line}: {message}")]
    SchemaError { line: usize, message: String },

    #[error("manifest contains no sample rows")]
    EmptyManifest,

    #[error("patch window {size:?} centered at {center:?} exceeds frame {frame:?}")]
    OutOfBounds {
        center: (usize, usize),
        size: (usize, usize),
        frame: (usize, usize),
    },

    #[error("split ratios {0:?} must be positive and sum to 1")]
    RatioError((f64, f64, f64)),

    #[error("unknown material class `{0}`")]
    UnknownClass(String),

    #[error("input {height}x{width} is smaller than the 32x32 minimum")]
    TooSmallInput { height: usize, width: usize },

    #[error("compression {compression} of {channels} channels leaves no output channel")]
    DegenerateChannels { channels: usize, compression: f64 },

    #[error("spatial mismatch: {left:?} vs {right:?}")]
    SpatialMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("sample row {row}: {message}")]
    DataError { row: usize, message: String },

    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint archive: {0}")]
    CorruptArchive(String),

    #[error("classifier training needs at least two classes, found {0}")]
    SingleClass(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("rows missing a property value: {0:?}")]
    MissingProperty(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
