use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("perfect prediction: mean squared error is zero")]
    PerfectPrediction,

    #[error("degenerate PSNR: max of prediction is {0}, logarithm undefined")]
    DegeneratePeak(f64),

    #[error("metric needs both normal and abnormal frames")]
    SingleClass,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {msg}")]
    Format { context: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
