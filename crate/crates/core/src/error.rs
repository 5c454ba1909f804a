use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot record `{0}`: kernel has no backward rule")]
    Unsupported(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("replay integrity failure in region {region}: {detail}")]
    Integrity { region: usize, detail: String },

    #[error("non-finite gradient in region {region} ({param})")]
    Numeric { region: usize, param: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
