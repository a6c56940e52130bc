use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("resolution mismatch: model expects {expected}x{expected}, input is {got_w}x{got_h}")]
    ResolutionMismatch {
        expected: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("tensor `{name}` has shape {found:?}, config requires {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("map not fitted: {0}")]
    Unfitted(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI and the HTTP service.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "precondition",
            Error::Shape(_) => "shape_mismatch",
            Error::ResolutionMismatch { .. } => "resolution_mismatch",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::Empty(_) => "empty_input",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::BadMagic { .. } => "bad_magic",
            Error::Version { .. } => "version_mismatch",
            Error::Length(_) => "length_mismatch",
            Error::TensorShape { .. } => "tensor_shape_mismatch",
            Error::MissingTensor(_) => "missing_tensor",
            Error::Dataset(_) => "invalid_dataset",
            Error::Config(_) => "invalid_config",
            Error::Unfitted(_) => "unfitted_map",
            Error::Image(_) => "image",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
