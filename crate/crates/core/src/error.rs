use thiserror::Error;

/// Errors raised by the engine, data pipeline and training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("no evaluable vessel pixels")]
    EmptyEval,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("training diverged at iteration {iteration} (seed {seed}, batch {batch}): {reason}")]
    Diverged {
        iteration: u64,
        seed: u64,
        batch: String,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
