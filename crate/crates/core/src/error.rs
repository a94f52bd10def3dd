use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },

    #[error("unknown class name {0:?}")]
    UnknownClass(String),

    #[error("invalid geometry in {feature}: {message}")]
    Geometry { feature: String, message: String },

    #[error("invalid annotation file: {0}")]
    Annotation(String),

    #[error("deformation field: {0}")]
    Field(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("synthetic generation failed: {0}")]
    Synth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
