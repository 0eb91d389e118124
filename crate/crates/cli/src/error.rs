use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags, malformed inputs or failed preconditions (exit code 2).
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] timemoe_core::Error),
    #[error(transparent)]
    Estimator(#[from] timemoe_estimator::Error),
    #[error(transparent)]
    Moe(#[from] timemoe_moe::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn core_is_usage(e: &timemoe_core::Error) -> bool {
    use timemoe_core::Error as C;
    matches!(
        e,
        C::Spec(_) | C::LagRange { .. } | C::Invalid(_) | C::Csv(_) | C::NotDiscrete(_) | C::EmptyData(_)
    )
}

impl Error {
    /// 2 for usage and validation failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        let usage = match self {
            Error::Usage(_) => true,
            Error::File { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Core(e) => core_is_usage(e),
            Error::Estimator(e) => match e {
                timemoe_estimator::Error::Config(_) | timemoe_estimator::Error::Contract { .. } => true,
                timemoe_estimator::Error::Core(c) => core_is_usage(c),
                _ => false,
            },
            Error::Moe(e) => match e {
                timemoe_moe::Error::Config(_) | timemoe_moe::Error::Contract { .. } | timemoe_moe::Error::Json(_) => true,
                timemoe_moe::Error::Core(c) => core_is_usage(c),
                _ => false,
            },
            Error::Json(_) | Error::Io(_) => false,
        };
        if usage {
            2
        } else {
            1
        }
    }
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}
