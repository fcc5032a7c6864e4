use wurstkit_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step} ({term})")]
    NonFinite { step: u64, term: String },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Precondition(_) => "precondition",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non-finite",
            Error::Image(_) => "image",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
