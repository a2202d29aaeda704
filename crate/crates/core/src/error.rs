use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("degenerate 2D footprint for gaussian {index}")]
    SingularFootprint { index: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("need at least {needed} cameras, got {got}")]
    TooFewCameras { needed: usize, got: usize },

    #[error("gaussian cloud is empty")]
    EmptyCloud,

    #[error("no points left after confidence filtering")]
    EmptyPointCloud,

    #[error("no training views")]
    NoViews,

    #[error("depth map has {actual:?} semantics, expected one of {expected}")]
    WrongDepthSemantics {
        actual: crate::types::DepthSemantics,
        expected: &'static str,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("missing property: {0}")]
    MissingProperty(String),

    #[error("non-finite PFM scale")]
    NonFiniteScale,

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("rotation is not orthonormal (error {0:e})")]
    NonOrthonormalRotation(f64),

    #[error("value out of range: {0}")]
    ValueRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        }
    }
}
