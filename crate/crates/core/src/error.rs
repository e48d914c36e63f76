use gencycle_render::RenderError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("malformed tensor container: {0}")]
    Container(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("unknown conditioning token {0}")]
    UnknownToken(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("image: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }
}
