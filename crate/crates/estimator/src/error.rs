use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] timemoe_autodiff::Error),
    #[error(transparent)]
    Core(#[from] timemoe_core::Error),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Training { epoch: usize, loss: f64 },
    #[error("model state: {0}")]
    State(String),
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract { op, msg: msg.into() })
}
