use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid image data: {0}")]
    InvalidImage(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite transform parameters")]
    NonFiniteTransform,

    #[error("singular transform matrix (determinant {0})")]
    SingularMatrix(f64),

    #[error("parameter vector length {got} does not match expected {expected}")]
    ParameterLength { expected: usize, got: usize },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("pyramid shrink factor {factor} exceeds image size {width}x{height}")]
    ShrinkTooLarge {
        factor: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible initial point: component {index} = {value} outside [{lower}, {upper}]")]
    Infeasible {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("non-finite objective at iteration {iteration}: {what}")]
    NonFiniteObjective { iteration: usize, what: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("MRI slice index {index} out of range (volume has {count} slices)")]
    SliceIndexOutOfRange { index: usize, count: usize },

    #[error("manifest error at {field}: {message}")]
    Manifest { field: String, message: String },

    #[error("missing intensity table entry for label {0}")]
    MissingTableEntry(u16),

    #[error("degenerate phantom region: {0}")]
    DegenerateRegion(String),

    #[error("registration failed for slice {slice}: {message}")]
    SliceFailed { slice: usize, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("NIfTI error on {}: {message}", path.display())]
    Nifti { path: PathBuf, message: String },

    #[error("image codec error on {}: {message}", path.display())]
    Codec { path: PathBuf, message: String },

    #[error("JSON error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
