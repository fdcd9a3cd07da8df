use std::path::PathBuf;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid scale {value} ({context})")]
    InvalidScale { value: f32, context: String },

    #[error("unsupported bit width {0}, expected 4 or 8")]
    Bits(u32),

    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("archive: {0}")]
    Archive(String),

    #[error("duplicate entry name `{0}`")]
    NameCollision(String),

    #[error("missing entry `{0}`")]
    MissingEntry(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("clustering: {0}")]
    Cluster(String),

    #[error("reorder: {0}")]
    Reorder(String),

    #[error("hessian is singular after damping (column {column})")]
    SingularHessian { column: usize },

    #[error("search: {0}")]
    Search(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
