use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside schedule range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("zero-norm feature vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("dataset error in {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("cache error in {path}: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite loss at step {step}; diagnostic snapshot written to {snapshot}")]
    NonFiniteLoss { step: usize, snapshot: PathBuf },

    #[error("pretrained weights: {0}")]
    Weights(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
