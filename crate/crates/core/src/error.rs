use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { field: field.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
