use thiserror::Error;

/// Errors raised across the library. Each variant maps to one failure class
/// that the command line reports with its own exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
