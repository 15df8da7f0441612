use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ply parse error at line {line} ({content:?}): {msg}")]
    PlyParse { line: usize, content: String, msg: String },
    #[error("empty scene: {0}")]
    EmptyScene(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rotation block is not orthonormal (max |R Rt - I| = {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("degenerate view direction: position coincides with the camera centre")]
    DegenerateDirection,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("non-finite loss at iteration {iteration}; offending gaussians: {indices:?}")]
    NonFiniteLoss { iteration: u64, indices: Vec<usize> },
    #[error("missing forward state: {0}")]
    Contract(String),
}

impl Error {
    /// Stable machine-readable code for command-line reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::PlyParse { .. } => "E_PLY",
            Error::EmptyScene(_) => "E_EMPTY",
            Error::Config(_) => "E_CONFIG",
            Error::Dimension(_) => "E_DIM",
            Error::NotOrthonormal { .. } => "E_ROTATION",
            Error::DegenerateDirection => "E_DEGENERATE",
            Error::InvalidInput(_) => "E_INPUT",
            Error::Shape { .. } => "E_SHAPE",
            Error::Domain(_) => "E_DOMAIN",
            Error::Image { .. } => "E_IMAGE",
            Error::Format(_) => "E_FORMAT",
            Error::Version { .. } => "E_VERSION",
            Error::NonFiniteLoss { .. } => "E_NONFINITE",
            Error::Contract(_) => "E_CONTRACT",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
