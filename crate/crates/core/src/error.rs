use thiserror::Error;

/// Errors produced by the library. The CLI flattens these into a one-line
/// `error: <kind>: <message>` diagnostic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid geometry in {op}: {msg}")]
    Geometry { op: &'static str, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("image decode failed for {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Geometry { .. } => "geometry",
            Error::Config(_) => "config",
            Error::InvalidBox(_) => "box",
            Error::Parse { .. } => "parse",
            Error::Image { .. } => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            op,
            dim,
            expected,
            actual,
        });
    }
    Ok(())
}
