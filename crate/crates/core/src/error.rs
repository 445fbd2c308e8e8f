use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cycle detected in graph")]
    CycleDetected,

    #[error("node `{node}` is not streamable: {reason}")]
    NotStreamable { node: String, reason: String },

    #[error("wrong graph mode: expected {expected}, found {found}")]
    WrongMode { expected: String, found: String },

    #[error("missing state `{name}`")]
    MissingState { name: String },

    #[error("node `{node}` is missing weight `{name}`")]
    MissingWeight { node: String, name: String },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid feature config: {0}")]
    InvalidConfig(String),

    #[error("input too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),

    #[error("bad model file: {reason}")]
    Format { reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape_mismatch(msg: impl Into<String>) -> Error {
        Error::ShapeMismatch(msg.into())
    }
}
