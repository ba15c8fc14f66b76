use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OarsegError>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum OarsegError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("config parse error at {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported volume format at {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid organ code {0} (valid codes are 0..=6)")]
    InvalidOrganCode(i64),
    #[error("unknown organ name {0:?}")]
    UnknownOrgan(String),
    #[error("invalid HU window: lo ({lo}) must be < hi ({hi})")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("need at least {need} patients, got {got}")]
    TooFewPatients { need: usize, got: usize },
    #[error("phantom shape {shape:?} too small to place all six structures (every dim must be >= {min})")]
    PhantomShapeTooSmall { shape: (usize, usize, usize), min: usize },
    #[error("spatial dims {dims:?} not divisible by {divisor} (generator depth {depth})")]
    SpatialDivisibility {
        dims: (usize, usize),
        divisor: usize,
        depth: usize,
    },
    #[error("model {0:?} is out of scope for this harness; known models: unet, se-resunet, gan-prod, gan-early, gan-late")]
    UnknownModel(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("no trained candidate for organ {0}")]
    MissingOrganModel(&'static str),
    #[error("invalid experiment plan: {0}")]
    InvalidPlan(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl OarsegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OarsegError::Io {
            path: path.into(),
            source,
        }
    }
}
