use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, extents or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Values that are not acceptable as inputs (e.g. non-finite features).
    #[error("input error: {0}")]
    Input(String),
    /// Dataset content that violates its declared schema.
    #[error("data error: {0}")]
    Data(String),
    /// An object used in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
    /// Encoder statistics were not paired with exactly one decoder consumer.
    #[error("pairing error: {0}")]
    Pairing(String),
    /// NaN/Inf encountered during training or a gradient.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Malformed on-disk blob or text file.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub(crate) fn shape_mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Config(format!("{what}: shape {a:?} does not match {b:?}"))
}
